//! ASCII PLY reading and writing for xyz point clouds.
//!
//! Only the subset this project produces is accepted: format `ascii 1.0`,
//! one `vertex` element with float properties `x`, `y`, `z`. Coordinates
//! are written with 9 significant digits, which round-trips to better than
//! 1e-7 at meter scale.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Write a cloud as ASCII PLY.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    for p in cloud.iter() {
        writeln!(w, "{:.8e} {:.8e} {:.8e}", p.x, p.y, p.z)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an ASCII PLY written by [`write_ply`] (or any conforming file with
/// x, y, z as the leading float properties of the vertex element).
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut expect_line = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(text))) => Ok((i + 1, text)),
            Some((i, Err(e))) => Err(parse_err(path, i + 1, e.to_string())),
            None => Err(parse_err(path, 0, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (n1, magic) = expect_line("`ply` magic")?;
    if magic.trim() != "ply" {
        return Err(parse_err(path, n1, "missing `ply` magic line"));
    }
    let (n2, format) = expect_line("format line")?;
    if format.trim() != "format ascii 1.0" {
        return Err(parse_err(
            path,
            n2,
            format!("unsupported format `{}` (only `format ascii 1.0`)", format.trim()),
        ));
    }

    // Header: skip comments, find the vertex element and its properties.
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let header_end;
    loop {
        let (ln, text) = expect_line("`end_header`")?;
        let text = text.trim().to_string();
        if text == "end_header" {
            header_end = ln;
            break;
        }
        if text.starts_with("comment") || text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix("element ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().unwrap_or_default();
            let count: usize = parts
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| parse_err(path, ln, "element line missing count"))?;
            if name == "vertex" {
                if vertex_count.is_some() {
                    return Err(parse_err(path, ln, "duplicate vertex element"));
                }
                vertex_count = Some(count);
                in_vertex_element = true;
            } else {
                return Err(parse_err(
                    path,
                    ln,
                    format!("unsupported element `{name}` (only `vertex`)"),
                ));
            }
        } else if let Some(rest) = text.strip_prefix("property ") {
            if in_vertex_element {
                let mut parts = rest.split_whitespace();
                let ty = parts.next().unwrap_or_default();
                let name = parts.next().unwrap_or_default();
                if ty != "float" && ty != "double" && ty != "float32" && ty != "float64" {
                    return Err(parse_err(
                        path,
                        ln,
                        format!("unsupported property type `{ty}` for `{name}`"),
                    ));
                }
                properties.push(name.to_string());
            }
        } else {
            return Err(parse_err(path, ln, format!("unrecognized header line `{text}`")));
        }
    }

    let vertex_count =
        vertex_count.ok_or_else(|| parse_err(path, header_end, "no vertex element declared"))?;
    if properties.len() < 3 || properties[0] != "x" || properties[1] != "y" || properties[2] != "z"
    {
        return Err(parse_err(
            path,
            header_end,
            format!("vertex properties must start with x, y, z (got {properties:?})"),
        ));
    }
    if vertex_count == 0 {
        return Err(parse_err(path, header_end, "vertex count is zero"));
    }

    let mut points = Vec::with_capacity(vertex_count);
    for _ in 0..vertex_count {
        let (ln, text) = match lines.next() {
            Some((i, Ok(t))) => (i + 1, t),
            Some((i, Err(e))) => return Err(parse_err(path, i + 1, e.to_string())),
            None => {
                return Err(parse_err(
                    path,
                    header_end,
                    format!(
                        "vertex data ended after {} of {} declared vertices",
                        points.len(),
                        vertex_count
                    ),
                ))
            }
        };
        let mut fields = text.split_whitespace();
        let mut coord = |axis: &str| -> Result<f64> {
            let raw = fields
                .next()
                .ok_or_else(|| parse_err(path, ln, format!("missing {axis} coordinate")))?;
            raw.parse::<f64>()
                .map_err(|_| parse_err(path, ln, format!("invalid {axis} coordinate `{raw}`")))
        };
        let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(parse_err(path, ln, "non-finite coordinate"));
        }
        points.push(Point3::new(x, y, z));
    }

    PointCloud::new(points)
}
