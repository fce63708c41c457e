fn main() {
    std::process::exit(sherpa_lift::cli::main());
}
