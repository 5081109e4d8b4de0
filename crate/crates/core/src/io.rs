//! File formats: CGRID complex grids, 8-bit PGM images and masks, network
//! and GRAPPA kernel checkpoints.
//!
//! Binary payloads are little-endian `f32`. Every binary file has a JSON
//! sidecar describing it.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grappa::{GrappaKernel, KernelGeometry};
use crate::kcore::{ComplexGrid, Domain, RealGrid};
use crate::nn::{ManifestEntry, ParamStore};
use crate::sampling::{AcsRegion, Mask, Pattern};

/// `path` with `suffix` appended to the full file name.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write(path, s.as_bytes())
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn f32_values(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes of f32 data, found {}",
                expected * 4,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct CgridHeader {
    width: usize,
    height: usize,
    domain: Domain,
    dtype: String,
}

const CGRID_DTYPE: &str = "c64";

/// Writes the blob to `path` and the header to `path.json`.
pub fn write_cgrid(path: &Path, g: &ComplexGrid) -> Result<()> {
    let header = CgridHeader {
        width: g.width,
        height: g.height,
        domain: g.domain,
        dtype: CGRID_DTYPE.into(),
    };
    write(path, &f32_bytes(g.data.iter().flat_map(|z| [z.re, z.im])))?;
    write_json(&sidecar_path(path, ".json"), &header)
}

pub fn read_cgrid(path: &Path) -> Result<ComplexGrid> {
    let side = sidecar_path(path, ".json");
    let header: CgridHeader = read_json(&side)?;
    if header.dtype != CGRID_DTYPE {
        return Err(Error::format(
            &side,
            format!("unsupported dtype '{}'", header.dtype),
        ));
    }
    let bytes = read(path)?;
    let vals = f32_values(path, &bytes, 2 * header.width * header.height)?;
    let data = vals
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    ComplexGrid::new(header.height, header.width, header.domain, data)
}

/// Binary 8-bit greyscale PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), height * width);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    write(path, &out)
}

/// Returns `(height, width, pixels)`; only maxval 255 is accepted.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let bad = |why: &str| Error::format(path, why.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    i += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes
        .get(i..i + width * height)
        .ok_or_else(|| bad("truncated raster"))?;
    Ok((height, width, pixels.to_vec()))
}

/// Linear map of `[lo, hi]` onto `0..=255`, clamped.
pub fn quantize(img: &RealGrid, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.data
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Exports `img` scaled by the value range of `reference` (itself when
/// `None`), so several images share one grey scale.
pub fn export_image(path: &Path, img: &RealGrid, reference: Option<&RealGrid>) -> Result<()> {
    let (lo, hi) = reference.unwrap_or(img).min_max();
    write_pgm(path, img.height, img.width, &quantize(img, lo, hi))
}

/// Exports a signed difference image with zero at mid-grey.
pub fn export_difference(path: &Path, diff: &RealGrid) -> Result<()> {
    let (lo, hi) = diff.min_max();
    let m = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    write_pgm(path, diff.height, diff.width, &quantize(diff, -m, m))
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskHeader {
    pattern: Pattern,
    acs_rows: usize,
    acs_cols: usize,
    seed: u64,
    target_fraction: f64,
}

/// Writes the mask as PGM (255 = sampled) plus `path.json`.
pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let pixels: Vec<u8> = m.keep.iter().map(|&k| if k { 255 } else { 0 }).collect();
    write_pgm(path, m.height, m.width, &pixels)?;
    write_json(
        &sidecar_path(path, ".json"),
        &MaskHeader {
            pattern: m.pattern,
            acs_rows: m.acs.rows,
            acs_cols: m.acs.cols,
            seed: m.seed,
            target_fraction: m.target_fraction,
        },
    )
}

/// Reads a mask PGM. Without a sidecar the ACS is empty and the pattern is
/// guessed from column constancy.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (height, width, pixels) = read_pgm(path)?;
    let keep: Vec<bool> = pixels.iter().map(|&p| p >= 128).collect();
    let side = sidecar_path(path, ".json");
    let mut mask = Mask {
        height,
        width,
        keep,
        acs: AcsRegion { rows: 0, cols: 0 },
        pattern: Pattern::Gauss2D,
        seed: 0,
        target_fraction: 0.0,
    };
    if side.exists() {
        let h: MaskHeader = read_json(&side)?;
        mask.pattern = h.pattern;
        mask.acs = AcsRegion {
            rows: h.acs_rows,
            cols: h.acs_cols,
        };
        mask.seed = h.seed;
        mask.target_fraction = h.target_fraction;
    } else {
        if mask.is_column_constant() {
            mask.pattern = Pattern::Gauss1D;
        }
        mask.target_fraction = mask.sampled_count() as f64 / (height * width) as f64;
    }
    Ok(mask)
}

/// Header of a parameter checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layers: Vec<ManifestEntry>,
    pub step: u64,
    pub config: serde_json::Value,
}

/// Writes `{stem}.json` and the parameter blob `{stem}.bin`.
pub fn save_params(stem: &Path, store: &ParamStore, config: &impl Serialize) -> Result<()> {
    let header = CheckpointHeader {
        layers: store.manifest.clone(),
        step: store.step,
        config: serde_json::to_value(config).expect("serializable config"),
    };
    write(
        &sidecar_path(stem, ".bin"),
        &f32_bytes(store.values.iter().copied()),
    )?;
    write_json(&sidecar_path(stem, ".json"), &header)
}

/// Reads a checkpoint written by [`save_params`].
pub fn load_params(stem: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let header: CheckpointHeader = read_json(&sidecar_path(stem, ".json"))?;
    let blob_path = sidecar_path(stem, ".bin");
    let total = header.layers.iter().map(ManifestEntry::len).sum();
    let values = f32_values(&blob_path, &read(&blob_path)?, total)?;
    Ok((header, values))
}

/// Loads checkpoint values into a store with the same layout.
pub fn restore_params(stem: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let (header, values) = load_params(stem)?;
    store.load_values(&header.layers, values)?;
    store.step = header.step;
    Ok(header.config)
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelHeader {
    geometry: KernelGeometry,
    fit_residual: f64,
}

/// Writes `{stem}.json` and the interleaved complex weights `{stem}.bin`.
pub fn save_kernel(stem: &Path, k: &GrappaKernel) -> Result<()> {
    write(
        &sidecar_path(stem, ".bin"),
        &f32_bytes(k.weights.iter().flat_map(|z| [z.re, z.im])),
    )?;
    write_json(
        &sidecar_path(stem, ".json"),
        &KernelHeader {
            geometry: k.geometry,
            fit_residual: k.fit_residual,
        },
    )
}

pub fn load_kernel(stem: &Path) -> Result<GrappaKernel> {
    let header: KernelHeader = read_json(&sidecar_path(stem, ".json"))?;
    let blob_path = sidecar_path(stem, ".bin");
    let vals = f32_values(
        &blob_path,
        &read(&blob_path)?,
        2 * header.geometry.weight_len(),
    )?;
    let weights = vals
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    GrappaKernel::new(header.geometry, weights, header.fit_residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grappa::{make_linear_data, LinearDataSpec};
    use crate::nn::{RemUNet, RemUNetConfig};
    use crate::sampling::gen_mask;

    #[test]
    fn cgrid_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.cgrid");
        let data = (0..12)
            .map(|i| Complex64::new(i as f64 * 0.5, -(i as f64)))
            .collect();
        let g = ComplexGrid::new(3, 4, Domain::KSpace, data).unwrap();
        write_cgrid(&path, &g).unwrap();
        assert_eq!(read_cgrid(&path).unwrap(), g);
        let side: serde_json::Value =
            serde_json::from_slice(&fs::read(sidecar_path(&path, ".json")).unwrap()).unwrap();
        assert_eq!(side["domain"], "kspace");
        assert_eq!(side["dtype"], "c64");
        assert_eq!(fs::metadata(&path).unwrap().len(), 12 * 8);
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.cgrid");
        write_cgrid(&path, &ComplexGrid::zeros(2, 2, Domain::Image)).unwrap();
        fs::write(&path, [0u8; 5]).unwrap();
        assert!(matches!(read_cgrid(&path), Err(Error::Format { .. })));
        assert!(matches!(
            read_cgrid(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn pgm_roundtrip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let pixels: Vec<u8> = (0..20).map(|i| (i * 13) as u8).collect();
        write_pgm(&path, 4, 5, &pixels).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (4, 5, pixels.clone()));
        let mut commented = b"P5\n# note\n5 4\n255\n".to_vec();
        commented.extend_from_slice(&pixels);
        fs::write(&path, commented).unwrap();
        assert_eq!(read_pgm(&path).unwrap().2, pixels);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = gen_mask(Pattern::Gauss1D, 32, 32, 0.3, Default::default(), 4).unwrap();
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    #[test]
    fn difference_export_centres_zero() {
        let d = RealGrid::new(1, 3, vec![-2.0, 0.0, 1.0]).unwrap();
        let (lo, hi) = (-2.0, 2.0);
        assert_eq!(quantize(&d, lo, hi), vec![0, 128, 191]);
    }

    #[test]
    fn network_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("gen");
        let (_, store) = RemUNet::new(RemUNetConfig::default(), 3).unwrap();
        save_params(&stem, &store, &RemUNetConfig::default()).unwrap();
        let (_, mut other) = RemUNet::new(RemUNetConfig::default(), 4).unwrap();
        let config = restore_params(&stem, &mut other).unwrap();
        assert_eq!(config["levels"], 3);
        for (a, b) in store.values.iter().zip(&other.values) {
            assert_eq!(*a as f32, *b as f32);
        }
        let header: serde_json::Value =
            serde_json::from_slice(&fs::read(sidecar_path(&stem, ".json")).unwrap()).unwrap();
        assert!(header["layers"][0]["name"].is_string());
        assert!(header["layers"][0]["shape"].is_array());
        let mut small = RemUNet::new(
            RemUNetConfig {
                base_width: 4,
                ..Default::default()
            },
            1,
        )
        .unwrap()
        .1;
        assert!(restore_params(&stem, &mut small).is_err());
    }

    #[test]
    fn kernel_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("kernel");
        let (_, k) =
            make_linear_data(&LinearDataSpec::new(16, 16, KernelGeometry::default(), 1)).unwrap();
        save_kernel(&stem, &k).unwrap();
        let back = load_kernel(&stem).unwrap();
        assert_eq!(back.geometry, k.geometry);
        assert!(back.max_abs_diff(&k) < 1e-6);
    }
}
