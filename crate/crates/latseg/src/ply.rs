//! ASCII PLY export: colored point clouds and line-segment arrow sets for
//! flow visualization.

use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

/// Fixed palette cycled by class id; negative ids render gray.
pub fn class_color(class: i64) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [31, 119, 180],
        [255, 127, 14],
        [44, 160, 44],
        [214, 39, 40],
        [148, 103, 189],
        [140, 86, 75],
        [227, 119, 194],
        [188, 189, 34],
    ];
    if class < 0 {
        [128, 128, 128]
    } else {
        PALETTE[class as usize % PALETTE.len()]
    }
}

/// Write points with per-point RGB colors.
pub fn write_colored_points(
    path: &Path,
    positions: &Array2<f64>,
    colors: &[[u8; 3]],
) -> std::io::Result<()> {
    assert_eq!(positions.nrows(), colors.len(), "one color per point");
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", positions.nrows())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "end_header")?;
    for (row, c) in positions.rows().into_iter().zip(colors) {
        writeln!(
            w,
            "{} {} {} {} {} {}",
            row[0] as f32, row[1] as f32, row[2] as f32, c[0], c[1], c[2]
        )?;
    }
    w.flush()
}

/// Write direction arrows as line segments from `origins[i]` to
/// `origins[i] + directions[i]`; zero-length directions are skipped.
pub fn write_arrows(
    path: &Path,
    origins: &[[f64; 3]],
    directions: &[[f64; 3]],
    color: [u8; 3],
) -> std::io::Result<()> {
    assert_eq!(origins.len(), directions.len(), "one direction per origin");
    let arrows: Vec<(usize, [f64; 3])> = origins
        .iter()
        .zip(directions)
        .enumerate()
        .filter(|(_, (_, d))| d.iter().any(|&v| v != 0.0))
        .map(|(i, (o, d))| (i, [o[0] + d[0], o[1] + d[1], o[2] + d[2]]))
        .collect();
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", arrows.len() * 2)?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "element edge {}", arrows.len())?;
    writeln!(w, "property int vertex1")?;
    writeln!(w, "property int vertex2")?;
    writeln!(w, "end_header")?;
    for (i, tip) in &arrows {
        let o = origins[*i];
        writeln!(
            w,
            "{} {} {} {} {} {}",
            o[0] as f32, o[1] as f32, o[2] as f32, color[0], color[1], color[2]
        )?;
        writeln!(
            w,
            "{} {} {} {} {} {}",
            tip[0] as f32, tip[1] as f32, tip[2] as f32, color[0], color[1], color[2]
        )?;
    }
    for i in 0..arrows.len() {
        writeln!(w, "{} {}", 2 * i, 2 * i + 1)?;
    }
    w.flush()
}

/// Check that an ASCII PLY header's element counts match its body.
pub fn validate_ascii_ply(text: &str) -> Result<(), String> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err("missing ply magic".to_string());
    }
    let mut counts = Vec::new();
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or("bad element line")?.to_string();
            let count: usize = parts
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or("bad element count")?;
            counts.push((name, count));
        }
    }
    let body: Vec<&str> = lines.collect();
    let expected: usize = counts.iter().map(|(_, c)| c).sum();
    if body.len() != expected {
        return Err(format!(
            "body has {} rows, header declares {}",
            body.len(),
            expected
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn points_file_is_self_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let pos = array![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]];
        write_colored_points(&path, &pos, &[[255, 0, 0], [0, 255, 0]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        validate_ascii_ply(&text).unwrap();
        assert!(text.contains("element vertex 2"));
    }

    #[test]
    fn arrows_skip_zero_directions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let origins = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let dirs = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        write_arrows(&path, &origins, &dirs, [255, 255, 0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        validate_ascii_ply(&text).unwrap();
        assert!(text.contains("element vertex 2"));
        assert!(text.contains("element edge 1"));
    }

    #[test]
    fn validator_rejects_count_mismatch() {
        let bad = "ply\nformat ascii 1.0\nelement vertex 3\nend_header\n0 0 0\n";
        assert!(validate_ascii_ply(bad).is_err());
    }
}
