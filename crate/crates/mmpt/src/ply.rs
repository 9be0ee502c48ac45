//! ASCII PLY export of colored point clouds. Positions are written at
//! full f32 precision; colors come from the source frame's pixels.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenize::Frame;

/// Pixel-major u8 colors for a frame, matching [H*W, 3] cloud order.
pub fn colors_from_frame<S: Scalar>(frame: &Frame<S>) -> Vec<[u8; 3]> {
    frame
        .pixels
        .data()
        .chunks(3)
        .map(|p| {
            let q = |v: S| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(p[0]), q(p[1]), q(p[2])]
        })
        .collect()
}

/// Writes one cloud ([n, 3]) with per-point colors.
pub fn write_ply<S: Scalar>(path: &Path, points: &Tensor<S>, colors: &[[u8; 3]]) -> Result<()> {
    if points.rank() != 2 || points.cols() != 3 {
        return Err(Error::BadShape {
            op: "write_ply",
            shape: points.shape().to_vec(),
            why: "points must be [n, 3]".into(),
        });
    }
    if points.rows() != colors.len() {
        return Err(Error::ShapeMismatch {
            op: "write_ply",
            lhs: points.shape().to_vec(),
            rhs: vec![colors.len(), 3],
        });
    }
    let mut out = Vec::with_capacity(points.rows() * 40 + 200);
    writeln!(out, "ply").unwrap();
    writeln!(out, "format ascii 1.0").unwrap();
    writeln!(out, "element vertex {}", points.rows()).unwrap();
    for axis in ["x", "y", "z"] {
        writeln!(out, "property float {axis}").unwrap();
    }
    for chan in ["red", "green", "blue"] {
        writeln!(out, "property uchar {chan}").unwrap();
    }
    writeln!(out, "end_header").unwrap();
    for (p, c) in points.data().chunks(3).zip(colors) {
        let v = |s: S| s.as_f64() as f32;
        writeln!(
            out,
            "{:e} {:e} {:e} {} {} {}",
            v(p[0]),
            v(p[1]),
            v(p[2]),
            c[0],
            c[1],
            c[2]
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads back a cloud written by `write_ply`.
pub fn read_ply(path: &Path) -> Result<(Vec<[f32; 3]>, Vec<[u8; 3]>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(
                n.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad vertex count {n:?}")))?,
            );
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::Format("missing vertex element".into()))?;
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for line in lines.take(count) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 {
            return Err(Error::Format(format!("bad vertex line {line:?}")));
        }
        let f = |i: usize| -> Result<f32> {
            tok[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad float {:?}", tok[i])))
        };
        let u = |i: usize| -> Result<u8> {
            tok[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad color {:?}", tok[i])))
        };
        points.push([f(0)?, f(1)?, f(2)?]);
        colors.push([u(3)?, u(4)?, u(5)?]);
    }
    if points.len() != count {
        return Err(Error::Format(format!(
            "expected {count} vertices, found {}",
            points.len()
        )));
    }
    Ok((points, colors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_f32_bits_and_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = Tensor::<f32>::randn(&[17, 3], 2.0, &mut rng);
        let colors: Vec<[u8; 3]> = (0..17).map(|i| [i as u8, 255 - i as u8, 7]).collect();
        write_ply(&path, &pts, &colors).unwrap();
        let (back_pts, back_cols) = read_ply(&path).unwrap();
        for (i, row) in pts.data().chunks(3).enumerate() {
            assert_eq!([row[0], row[1], row[2]], back_pts[i]);
        }
        assert_eq!(colors, back_cols);
    }

    #[test]
    fn header_layout_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.ply");
        let pts = Tensor::<f64>::zeros(&[1, 3]);
        write_ply(&path, &pts, &[[0, 128, 255]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let head: Vec<&str> = text.lines().take(9).collect();
        assert_eq!(
            head,
            [
                "ply",
                "format ascii 1.0",
                "element vertex 1",
                "property float x",
                "property float y",
                "property float z",
                "property uchar red",
                "property uchar green",
                "property uchar blue",
            ]
        );
    }

    #[test]
    fn frame_colors_quantize_by_rounding() {
        let mut px = Tensor::<f64>::zeros(&[1, 2, 3]);
        px.data_mut().copy_from_slice(&[0.0, 0.5, 1.0, -0.2, 1.4, 0.25]);
        let frame = Frame::new(0, px).unwrap();
        let cols = colors_from_frame(&frame);
        assert_eq!(cols, vec![[0, 128, 255], [0, 255, 64]]);
    }

    #[test]
    fn shape_and_length_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        let pts = Tensor::<f32>::zeros(&[2, 3]);
        assert!(write_ply(&path, &pts, &[[0, 0, 0]]).is_err());
        let flat = Tensor::<f32>::zeros(&[6]);
        assert!(write_ply(&path, &flat, &[[0, 0, 0]]).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ply");
        let pts = Tensor::<f32>::zeros(&[3, 3]);
        write_ply(&path, &pts, &[[1, 2, 3]; 3]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        std::fs::write(&path, cut).unwrap();
        assert!(read_ply(&path).is_err());
    }
}
