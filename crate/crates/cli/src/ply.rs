//! ASCII PLY output with a fixed part palette.

use std::fmt::Write as _;
use std::path::Path;

use anseg::geom::Point3;
use anyhow::{bail, Context, Result};

pub type Rgb = [u8; 3];

pub const BLACK: Rgb = [0, 0, 0];
/// Unannotated points. Not a palette color.
pub const GRAY: Rgb = [128, 128, 128];

/// Part colors. Black and gray never appear here.
pub const PALETTE: [Rgb; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

pub fn palette(index: usize) -> Rgb {
    PALETTE[index % PALETTE.len()]
}

pub fn to_string(points: &[Point3], colors: &[Rgb], comments: &[String]) -> Result<String> {
    if points.len() != colors.len() {
        bail!("{} points but {} colors", points.len(), colors.len());
    }
    let mut s = String::from("ply\nformat ascii 1.0\n");
    for c in comments {
        if c.contains('\n') {
            bail!("PLY comments must be single lines");
        }
        writeln!(s, "comment {c}")?;
    }
    writeln!(s, "element vertex {}", points.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(s, "property float {axis}")?;
    }
    for ch in ["red", "green", "blue"] {
        writeln!(s, "property uchar {ch}")?;
    }
    s.push_str("end_header\n");
    for (p, c) in points.iter().zip(colors) {
        writeln!(s, "{:.6} {:.6} {:.6} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?;
    }
    Ok(s)
}

pub fn write(path: &Path, points: &[Point3], colors: &[Rgb], comments: &[String]) -> Result<()> {
    let text = to_string(points, colors, comments)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Parses the vertex block of an ASCII PLY with x y z red green blue properties.
pub fn parse(text: &str) -> Result<Vec<(Point3, Rgb)>> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        bail!("missing ply magic");
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut format_ok = false;
    for line in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", "1.0"] => format_ok = true,
            ["comment", ..] => {}
            ["element", "vertex", n] => count = Some(n.parse::<usize>()?),
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => bail!("unexpected header line {line:?}"),
        }
    }
    if !format_ok {
        bail!("not an ASCII 1.0 PLY");
    }
    if props != ["x", "y", "z", "red", "green", "blue"] {
        bail!("unexpected vertex properties {props:?}");
    }
    let count = count.context("missing vertex element")?;
    let mut out = Vec::with_capacity(count);
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            bail!("vertex line {line:?} has {} fields", f.len());
        }
        let p = [f[0].parse()?, f[1].parse()?, f[2].parse()?];
        let c = [f[3].parse()?, f[4].parse()?, f[5].parse()?];
        out.push((p, c));
    }
    if out.len() != count {
        bail!("header declares {count} vertices, found {}", out.len());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_excludes_black_and_gray_and_is_distinct() {
        for (i, a) in PALETTE.iter().enumerate() {
            assert_ne!(*a, BLACK);
            assert_ne!(*a, GRAY);
            assert!(PALETTE[i + 1..].iter().all(|b| b != a));
        }
    }

    #[test]
    fn write_then_parse_roundtrips() {
        let pts = vec![[0.5, -1.25, 2.0], [0.0, 0.0, 0.0]];
        let cols = vec![palette(3), BLACK];
        let text = to_string(&pts, &cols, &["config_hash abc".into()]).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\ncomment config_hash abc\nelement vertex 2\n"));
        let back = parse(&text).unwrap();
        assert_eq!(back, vec![(pts[0], cols[0]), (pts[1], cols[1])]);
    }

    #[test]
    fn mismatched_lengths_fail() {
        assert!(to_string(&[[0.0; 3]], &[], &[]).is_err());
    }

    #[test]
    fn truncated_file_fails_to_parse() {
        let text = to_string(&[[0.0; 3], [1.0; 3]], &[BLACK, BLACK], &[]).unwrap();
        let cut = text.trim_end().rsplit_once('\n').unwrap().0;
        assert!(parse(cut).is_err());
    }
}
