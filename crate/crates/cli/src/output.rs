//! Artifact writers and readers. Every writer takes the resolved run config
//! and embeds it, as comments where the format allows them.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flowinv_core::{Latent, Shape, SpatialMap};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

/// CSV with `# key=value` config lines before the header.
pub fn write_csv(
    path: &Path,
    cfg: &RunConfig,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for line in cfg.lines() {
        writeln!(buf, "# {line}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    write_file(path, &buf)
}

/// Reads a CSV written by [`write_csv`], skipping comment lines.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

/// Pretty JSON with the config under `"config"`.
pub fn write_json(path: &Path, cfg: &RunConfig, body: serde_json::Value) -> Result<(), CliError> {
    let mut obj = serde_json::Map::new();
    obj.insert("config".into(), cfg.to_json());
    match body {
        serde_json::Value::Object(m) => obj.extend(m),
        other => {
            obj.insert("result".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn netpbm_header(magic: &str, cfg: &RunConfig, w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("{magic}\n");
    for line in cfg.lines() {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str(&format!("{w} {h}\n255\n"));
    out.into_bytes()
}

/// Binary PPM of a 3-channel latent, clamped to `[0, 1]`.
pub fn write_ppm(path: &Path, cfg: &RunConfig, z: &Latent) -> Result<(), CliError> {
    let s = z.shape();
    if s.channels != 3 {
        return Err(CliError::Usage(format!(
            "PPM needs 3 channels, latent has {}",
            s.channels
        )));
    }
    let mut buf = netpbm_header("P6", cfg, s.width, s.height);
    for h in 0..s.height {
        for w in 0..s.width {
            for c in 0..3 {
                buf.push(to_byte(z.get(c, h, w)));
            }
        }
    }
    write_file(path, &buf)
}

/// Binary PGM of a map, clamped to `[0, 1]`.
pub fn write_pgm(path: &Path, cfg: &RunConfig, m: &SpatialMap) -> Result<(), CliError> {
    let mut buf = netpbm_header("P5", cfg, m.width(), m.height());
    buf.extend(m.as_slice().iter().map(|&x| to_byte(x)));
    write_file(path, &buf)
}

fn netpbm_token(r: &mut impl BufRead) -> Result<String, CliError> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8];
        if r.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if ch.is_ascii_whitespace() {
            if !tok.is_empty() {
                break;
            }
        } else {
            tok.push(ch);
        }
    }
    Ok(tok)
}

/// Reads a binary PPM (maxval 255) into a `[3, H, W]` latent on `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Latent, CliError> {
    let bad = |m: &str| CliError::Usage(format!("{}: {m}", path.display()));
    let f = fs::File::open(path).map_err(|e| bad(&e.to_string()))?;
    let mut r = BufReader::new(f);
    if netpbm_token(&mut r)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let mut num = || -> Result<usize, CliError> {
        netpbm_token(&mut r)?
            .parse()
            .map_err(|_| bad("bad PPM header"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let mut data = vec![0u8; 3 * w * h];
    r.read_exact(&mut data)
        .map_err(|_| bad("truncated pixel data"))?;
    Ok(Latent::from_fn(Shape::new(3, h, w), |c, y, x| {
        data[3 * (y * w + x) + c] as f64 / 255.0
    }))
}

pub const LATENT_MAGIC: &[u8; 8] = b"FLOWLAT1";

#[derive(Serialize, Deserialize)]
struct LatentHeader {
    shape: [usize; 3],
    config: serde_json::Value,
}

/// Latent file: `FLOWLAT1`, one JSON header line, little-endian `f64` values.
pub fn write_latent(path: &Path, cfg: &RunConfig, z: &Latent) -> Result<(), CliError> {
    let s = z.shape();
    let header = LatentHeader {
        shape: [s.channels, s.height, s.width],
        config: cfg.to_json(),
    };
    let mut buf = LATENT_MAGIC.to_vec();
    serde_json::to_writer(&mut buf, &header)?;
    buf.push(b'\n');
    for x in z.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &buf)
}

pub fn read_latent(path: &Path) -> Result<Latent, CliError> {
    let bad = |m: &str| CliError::Usage(format!("{}: {m}", path.display()));
    let bytes = fs::read(path).map_err(|e| bad(&e.to_string()))?;
    if bytes.len() < 8 || &bytes[..8] != LATENT_MAGIC {
        return Err(bad("not a latent file"));
    }
    let nl = bytes[8..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header"))?
        + 8;
    let header: LatentHeader =
        serde_json::from_slice(&bytes[8..nl]).map_err(|e| bad(&e.to_string()))?;
    let [c, h, w] = header.shape;
    let payload = &bytes[nl + 1..];
    if payload.len() != 8 * c * h * w {
        return Err(bad("payload length does not match the shape"));
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Latent::from_vec(Shape::new(c, h, w), data)?)
}

/// A latent from a `.ppm` image or a latent file.
pub fn read_image_or_latent(path: &Path) -> Result<Latent, CliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        _ => read_latent(path),
    }
}

/// Shortest round-trip text of a float, for CSV cells.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cfg() -> RunConfig {
        RunConfig {
            values: BTreeMap::from([("seed".to_string(), "3".to_string())]),
        }
    }

    #[test]
    fn ppm_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let z = Latent::from_fn(Shape::new(3, 2, 3), |c, h, w| (c + h + w) as f64 / 6.0);
        write_ppm(&p, &cfg(), &z).unwrap();
        let back = read_ppm(&p).unwrap();
        assert!(back.max_abs_diff(&z) <= 0.5 / 255.0 + 1e-12);
        let text = fs::read(&p).unwrap();
        assert!(text.starts_with(b"P6\n# seed=3\n3 2\n255\n"));
    }

    #[test]
    fn latent_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.lat");
        let z = Latent::from_fn(Shape::new(2, 3, 1), |c, h, _| {
            (c as f64 + 0.1) / (h as f64 + 3.0)
        });
        write_latent(&p, &cfg(), &z).unwrap();
        assert_eq!(read_latent(&p).unwrap(), z);
        fs::write(&p, b"FLOWLAT1{\"shape\":[1,1,2],\"config\":{}}\n12345678").unwrap();
        assert!(read_latent(&p).is_err());
    }

    #[test]
    fn csv_comments_are_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![vec!["1".to_string(), num(0.5)]];
        write_csv(&p, &cfg(), &["step", "loss"], &rows).unwrap();
        let (h, r) = read_csv(&p).unwrap();
        assert_eq!(h, ["step", "loss"]);
        assert_eq!(r, rows);
    }
}
