//! Atomic file output, CSV reports and binary PGM images.

use std::fs;
use std::io::Write;
use std::path::Path;

use cliquenet_core::analyzer::{group_label, CountReport, GrayImage};

use crate::error::{CliError, Result};

/// Writes `bytes` to a sibling temp file, syncs it and renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// 8-bit binary PGM (`P5`).
pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |d: &str| CliError::format("PGM", d);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (width, height) = (num(fields[1])?, num(fields[2])?);
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?.to_vec();
    if pixels.len() != width * height {
        return Err(bad("raster size does not match header"));
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn matrix_csv(matrix: &[Vec<f64>]) -> String {
    let n = matrix.first().map_or(0, Vec::len);
    let mut out = String::from("i");
    for j in 0..n {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (i, row) in matrix.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// `section,name,value` rows: totals, parameter groups, then per-layer FLOPs.
pub fn report_csv(report: &CountReport) -> String {
    let mut out = String::from("section,name,value\n");
    out.push_str(&format!("total,params,{}\n", report.total_params));
    if let Some((h, w)) = report.resolution {
        out.push_str(&format!("total,flops,{}\n", report.total_flops));
        out.push_str(&format!("total,resolution,{h}x{w}\n"));
    }
    for (g, c) in &report.groups {
        out.push_str(&format!("params,{},{c}\n", group_label(*g)));
    }
    for l in &report.layers {
        out.push_str(&format!("flops,{},{}\n", l.name, l.flops));
    }
    out
}

/// Human-readable summary in millions of parameters and GFLOPs.
pub fn report_table(name: &str, report: &CountReport) -> String {
    let mut out = format!("{name}\n  params  {:>10.3}M\n", report.total_params as f64 / 1e6);
    if let Some((h, w)) = report.resolution {
        out.push_str(&format!("  flops   {:>10.3}G  at {h}x{w}\n", report.total_flops as f64 / 1e9));
    }
    for (g, c) in &report.groups {
        out.push_str(&format!("    {:<16}{c:>12}\n", group_label(*g)));
    }
    out
}
