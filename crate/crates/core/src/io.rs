//! File formats and atomic writers: OBJ meshes, 8-bit RGB / 1-bit mask
//! PNGs, and full-precision field snapshots for re-rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::field::{FieldParams, TetGrid};
use crate::image::{Image, Mask};
use crate::render::AlbedoField;
use crate::tessellate::SurfaceMesh;
use crate::{Error, Result, Vec3};

/// Write via a temp file in the same directory plus rename, so a failed
/// run never leaves a partial final artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// --- OBJ ---------------------------------------------------------------------

/// OBJ text for a mesh: `v` lines, per-face `vn` lines, and `f` lines with
/// normal indices; counterclockwise winding viewed from outside. Floats
/// use Rust's shortest round-trip formatting, so coordinates parse back
/// bit-identically.
pub fn mesh_to_obj(mesh: &SurfaceMesh) -> String {
    let mut out = String::new();
    out.push_str("# generated by sherpa-lift\n");
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for n in &mesh.face_normals {
        out.push_str(&format!("vn {} {} {}\n", n.x, n.y, n.z));
    }
    for (i, t) in mesh.triangles.iter().enumerate() {
        let n = i + 1;
        out.push_str(&format!(
            "f {}//{n} {}//{n} {}//{n}\n",
            t[0] + 1,
            t[1] + 1,
            t[2] + 1
        ));
    }
    out
}

/// Parse the subset of OBJ written by `mesh_to_obj` (plus plain `f a b c`
/// faces). Face normals are recomputed from the vertices so imported
/// meshes render identically to in-memory ones.
pub fn obj_to_mesh(text: &str) -> Result<SurfaceMesh> {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        let parse_err =
            |what: &str| Error::Mesh(format!("obj line {}: bad {what}: `{line}`", lineno + 1));
        match tag {
            "v" => {
                let mut coords = [0.0; 3];
                for c in &mut coords {
                    *c = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err("vertex"))?;
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            "vn" => {} // normals are derived; ignore on read
            "f" => {
                let mut idx = [0u32; 3];
                let mut count = 0;
                for part in parts {
                    if count >= 3 {
                        return Err(Error::Mesh(format!(
                            "obj line {}: only triangles are supported",
                            lineno + 1
                        )));
                    }
                    let vi = part
                        .split('/')
                        .next()
                        .and_then(|s| s.parse::<i64>().ok())
                        .ok_or_else(|| parse_err("face"))?;
                    if vi < 1 || vi as usize > vertices.len() {
                        return Err(Error::Mesh(format!(
                            "obj line {}: vertex index {vi} out of range",
                            lineno + 1
                        )));
                    }
                    idx[count] = (vi - 1) as u32;
                    count += 1;
                }
                if count != 3 {
                    return Err(parse_err("face"));
                }
                triangles.push(idx);
            }
            _ => {} // ignore other statements
        }
    }
    if vertices.is_empty() && triangles.is_empty() {
        return Err(Error::Mesh("obj file has no geometry".into()));
    }
    Ok(SurfaceMesh::from_parts(vertices, triangles))
}

pub fn write_obj(path: &Path, mesh: &SurfaceMesh) -> Result<()> {
    atomic_write(path, mesh_to_obj(mesh).as_bytes())
}

pub fn read_obj(path: &Path) -> Result<SurfaceMesh> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    obj_to_mesh(&text)
}

// --- PNG ---------------------------------------------------------------------

/// 8-bit RGB, row-major, no gamma tagging; values are data.
pub fn png_rgb_bytes(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::ShapeMismatch(format!(
            "png export expects 3 channels, got {}",
            image.channels
        )));
    }
    let mut rgb = Vec::with_capacity(image.height * image.width * 3);
    for v in &image.data {
        rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, image.width as u32, image.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Mesh(format!("png encode: {e}")))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::Mesh(format!("png encode: {e}")))?;
    }
    Ok(bytes)
}

/// 1-bit grayscale PNG: white where the mask is true.
pub fn png_mask_bytes(mask: &Mask) -> Result<Vec<u8>> {
    let row_bytes = mask.width.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, mask.width as u32, mask.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Mesh(format!("png encode: {e}")))?;
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::Mesh(format!("png encode: {e}")))?;
    }
    Ok(bytes)
}

pub fn write_png_rgb(path: &Path, image: &Image) -> Result<()> {
    atomic_write(path, &png_rgb_bytes(image)?)
}

pub fn write_png_mask(path: &Path, mask: &Mask) -> Result<()> {
    atomic_write(path, &png_mask_bytes(mask)?)
}

// --- field snapshots -----------------------------------------------------------

/// Serialized field state; serde_json writes f64 with shortest round-trip
/// formatting, so loading reproduces the exact parameters.
#[derive(Debug, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub resolution: usize,
    pub sdf: Vec<f64>,
    pub offset: Vec<[f64; 3]>,
    pub albedo: Option<Vec<[f64; 3]>>,
}

impl FieldSnapshot {
    pub fn capture(grid: &TetGrid, params: &FieldParams, albedo: Option<&AlbedoField>) -> Self {
        FieldSnapshot {
            resolution: grid.resolution,
            sdf: params.sdf.clone(),
            offset: params.offset.iter().map(|o| [o.x, o.y, o.z]).collect(),
            albedo: albedo.map(|a| a.rgb.clone()),
        }
    }

    pub fn restore(&self) -> Result<(TetGrid, FieldParams, Option<AlbedoField>)> {
        let grid = TetGrid::new(self.resolution)?;
        if self.sdf.len() != grid.vertex_count() || self.offset.len() != grid.vertex_count() {
            return Err(Error::ShapeMismatch(format!(
                "snapshot has {} sdf values for a resolution-{} grid",
                self.sdf.len(),
                self.resolution
            )));
        }
        let params = FieldParams {
            sdf: self.sdf.clone(),
            offset: self
                .offset
                .iter()
                .map(|o| Vec3::new(o[0], o[1], o[2]))
                .collect(),
        };
        let albedo = self.albedo.as_ref().map(|a| AlbedoField { rgb: a.clone() });
        Ok((grid, params, albedo))
    }
}

pub fn write_snapshot(path: &Path, snapshot: &FieldSnapshot) -> Result<()> {
    let json = serde_json::to_string(snapshot)
        .map_err(|e| Error::Mesh(format!("snapshot encode: {e}")))?;
    atomic_write(path, json.as_bytes())
}

pub fn read_snapshot(path: &Path) -> Result<FieldSnapshot> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Mesh(format!("snapshot decode: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{prior_sdf, PriorScene};
    use crate::tessellate::marching_tets;

    fn sphere_mesh() -> SurfaceMesh {
        let grid = TetGrid::new(6).unwrap();
        let scene = PriorScene::sphere(Vec3::zeros(), 0.5).unwrap();
        let params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        marching_tets(&grid, &params)
    }

    #[test]
    fn obj_round_trip_is_lossless() {
        let mesh = sphere_mesh();
        let text = mesh_to_obj(&mesh);
        let back = obj_to_mesh(&text).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
        // derived normals agree bit-exactly because vertices do
        for (a, b) in mesh.face_normals.iter().zip(&back.face_normals) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
        }
    }

    #[test]
    fn obj_rejects_garbage() {
        assert!(obj_to_mesh("").is_err());
        assert!(obj_to_mesh("v 1 2").is_err());
        assert!(obj_to_mesh("v 0 0 0\nf 1 2 3").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_tmp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/y/file.txt");
        atomic_write(&path, b"hello").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"hello");
        let entries: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn png_bytes_are_deterministic() {
        let mut img = Image::zeros(5, 7, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 11) as f64 / 10.0;
        }
        assert_eq!(png_rgb_bytes(&img).unwrap(), png_rgb_bytes(&img).unwrap());
        let mut mask = Mask::new_false(5, 7);
        mask.set(2, 3, true);
        mask.set(4, 6, true);
        assert_eq!(png_mask_bytes(&mask).unwrap(), png_mask_bytes(&mask).unwrap());
    }

    #[test]
    fn snapshot_round_trip_exact() {
        let grid = TetGrid::new(3).unwrap();
        let scene = PriorScene::sphere(Vec3::zeros(), 0.4).unwrap();
        let mut params = FieldParams::from_fn(&grid, |p| prior_sdf(&scene, p));
        params.offset[10] = Vec3::new(0.01, -0.02, 0.003);
        let albedo = AlbedoField::constant(grid.vertex_count(), [0.25, 0.5, 0.75]);
        let snap = FieldSnapshot::capture(&grid, &params, Some(&albedo));
        let json = serde_json::to_string(&snap).unwrap();
        let back: FieldSnapshot = serde_json::from_str(&json).unwrap();
        let (grid2, params2, albedo2) = back.restore().unwrap();
        assert_eq!(grid2.vertex_count(), grid.vertex_count());
        assert_eq!(params2, params);
        assert_eq!(albedo2.unwrap(), albedo);
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
