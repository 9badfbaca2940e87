//! Output helpers: atomic writes, CSV escaping and ASCII PLY.

use crate::error::Result;
use nalgebra::Vector3;
use std::io::Write;
use std::path::Path;

/// Writes to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// RFC 4180 field quoting.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn ply_ascii(vertices: &[Vector3<f64>], triangles: &[[usize; 3]], comments: &[String]) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    for c in comments {
        out.push_str(&format!("comment {}\n", c.replace('\n', " ")));
    }
    out.push_str(&format!("element vertex {}\nproperty double x\nproperty double y\nproperty double z\n", vertices.len()));
    out.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\nend_header\n", triangles.len()));
    for v in vertices {
        out.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
    }
    for t in triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("abc"), "abc");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn ply_header_counts() {
        let s = ply_ascii(&[Vector3::zeros(), Vector3::x(), Vector3::y()], &[[0, 1, 2]], &["test".into()]);
        assert!(s.contains("element vertex 3\n"));
        assert!(s.contains("element face 1\n"));
        assert!(s.ends_with("3 0 1 2\n"));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = std::env::temp_dir().join(format!("uobs-io-{}", std::process::id()));
        let p = dir.join("x.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        std::fs::remove_dir_all(dir).unwrap();
    }
}
