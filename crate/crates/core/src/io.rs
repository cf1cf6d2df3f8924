//! On-disk formats: complex arrays, masks, checkpoints, PNG previews and CSV.
//!
//! Complex arrays and masks are header/binary pairs sharing a base path:
//! `<base>.hdr` holds a short text header and `<base>.bin` the raw row-major
//! payload (little-endian `f32` interleaved re/im, or one byte per mask cell).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::network::{FilterInit, NetworkConfig, NetworkParams, NetworkShape};
use crate::numerics::{ComplexImage, RealImage, C64};
use crate::sampling::{MaskPattern, SamplingMask};

pub const COMPLEX_MAGIC: &str = "cplx v1";
pub const MASK_MAGIC: &str = "mask v1";
pub const CHECKPOINT_MAGIC: &str = "ifrnet v1";

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn header_path(base: &Path) -> PathBuf {
    with_suffix(base, ".hdr")
}

pub fn binary_path(base: &Path) -> PathBuf {
    with_suffix(base, ".bin")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_dims(line: Option<&str>, path: &Path) -> Result<(usize, usize)> {
    let mut it = line.unwrap_or("").split_whitespace();
    let mut next = || -> Result<usize> {
        it.next()
            .and_then(|t| t.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::format(path, "expected positive dims `H W`"))
    };
    Ok((next()?, next()?))
}

/// Writes `<base>.hdr` and `<base>.bin` (values stored as `f32`).
pub fn write_complex(base: &Path, img: &ComplexImage) -> Result<()> {
    let (h, w) = img.dims();
    write_bytes(&header_path(base), format!("{COMPLEX_MAGIC}\n{h} {w}\n").as_bytes())?;
    let mut bytes = Vec::with_capacity(img.len() * 8);
    for c in img.data() {
        bytes.extend_from_slice(&(c.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(c.im as f32).to_le_bytes());
    }
    write_bytes(&binary_path(base), &bytes)
}

pub fn read_complex(base: &Path) -> Result<ComplexImage> {
    let hdr_path = header_path(base);
    let text = read_text(&hdr_path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(COMPLEX_MAGIC) {
        return Err(Error::format(&hdr_path, format!("missing `{COMPLEX_MAGIC}` magic")));
    }
    let (h, w) = parse_dims(lines.next(), &hdr_path)?;
    let bin_path = binary_path(base);
    let bytes = read_bytes(&bin_path)?;
    if bytes.len() != h * w * 8 {
        return Err(Error::format(
            &bin_path,
            format!("expected {} bytes for {h}×{w}, found {}", h * w * 8, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[0..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..8].try_into().expect("4 bytes"));
            C64::new(re as f64, im as f64)
        })
        .collect();
    ComplexImage::from_vec(h, w, data)
}

/// Writes the mask pair; the header also records the achieved rate.
pub fn write_mask(base: &Path, mask: &SamplingMask) -> Result<()> {
    let (h, w) = mask.dims();
    let header = format!(
        "{MASK_MAGIC}\n{h} {w} {} {} {}\nachieved {}\n",
        mask.nominal_rate(),
        mask.seed(),
        mask.pattern(),
        mask.achieved_rate()
    );
    write_bytes(&header_path(base), header.as_bytes())?;
    write_bytes(&binary_path(base), mask.cells())
}

pub fn read_mask(base: &Path) -> Result<SamplingMask> {
    let hdr_path = header_path(base);
    let text = read_text(&hdr_path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MASK_MAGIC) {
        return Err(Error::format(&hdr_path, format!("missing `{MASK_MAGIC}` magic")));
    }
    let fields: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::format(&hdr_path, "expected `H W rate seed pattern`"));
    }
    let (h, w) = parse_dims(Some(&fields[..2].join(" ")), &hdr_path)?;
    let rate: f64 = fields[2]
        .parse()
        .map_err(|_| Error::format(&hdr_path, format!("bad rate `{}`", fields[2])))?;
    let seed: u64 = fields[3]
        .parse()
        .map_err(|_| Error::format(&hdr_path, format!("bad seed `{}`", fields[3])))?;
    let pattern: MaskPattern = fields[4]
        .parse()
        .map_err(|e: Error| Error::format(&hdr_path, e.to_string()))?;
    let bin_path = binary_path(base);
    let cells = read_bytes(&bin_path)?;
    SamplingMask::from_parts(h, w, cells, pattern, Some(rate), seed)
        .map_err(|e| Error::format(&bin_path, e.to_string()))
}

/// Self-describing checkpoint header.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub shape: NetworkShape,
    pub dcfg: DescriptorConfig,
    pub n_params: usize,
}

impl CheckpointHeader {
    pub fn new(theta: &NetworkParams, dcfg: &DescriptorConfig) -> Self {
        Self {
            shape: theta.shape(),
            dcfg: *dcfg,
            n_params: theta.len(),
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let s = &self.shape;
        vec![
            ("stages", s.stages.to_string()),
            ("blocks", s.blocks.to_string()),
            ("filters", s.filters.to_string()),
            ("filter_size", s.filter_size.to_string()),
            ("c2_filter_size", s.c2_filter_size.to_string()),
            ("plf_points", s.plf_points.to_string()),
            ("weight_sharing", s.weight_sharing.to_string()),
            ("patch_side", self.dcfg.patch_side.to_string()),
            ("blur_sigma", format!("{:?}", self.dcfg.blur_sigma)),
            ("blur_side", self.dcfg.blur_side.to_string()),
            ("n_params", self.n_params.to_string()),
        ]
    }

    /// Lines `key: expected -> found` for every differing field.
    pub fn diff(&self, found: &CheckpointHeader) -> Vec<String> {
        self.fields()
            .into_iter()
            .zip(found.fields())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: expected {}, found {}", a.0, a.1, b.1))
            .collect()
    }

    fn parse(path: &Path, lines: &[&str]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            lines
                .iter()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| Error::format(path, format!("missing header key `{key}`")))
        };
        fn num<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format(path, format!("bad value `{v}` for `{key}`")))
        }
        let u = |key: &str| -> Result<usize> { num(path, key, get(key)?) };
        Ok(Self {
            shape: NetworkShape {
                stages: u("stages")?,
                blocks: u("blocks")?,
                filters: u("filters")?,
                filter_size: u("filter_size")?,
                c2_filter_size: u("c2_filter_size")?,
                plf_points: u("plf_points")?,
                weight_sharing: num(path, "weight_sharing", get("weight_sharing")?)?,
            },
            dcfg: DescriptorConfig {
                patch_side: u("patch_side")?,
                blur_sigma: num(path, "blur_sigma", get("blur_sigma")?)?,
                blur_side: u("blur_side")?,
            },
            n_params: u("n_params")?,
        })
    }
}

/// Magic line, `key=value` header lines, `end`, then every parameter as
/// little-endian `f64` in [`NetworkParams::visit`] order.
pub fn write_checkpoint(path: &Path, theta: &NetworkParams, dcfg: &DescriptorConfig) -> Result<()> {
    let header = CheckpointHeader::new(theta, dcfg);
    let mut text = format!("{CHECKPOINT_MAGIC}\n");
    for (k, v) in header.fields() {
        let _ = writeln!(text, "{k}={v}");
    }
    text.push_str("end\n");
    let mut bytes = text.into_bytes();
    theta.visit(|_, v| bytes.extend_from_slice(&v.to_le_bytes()));
    write_bytes(path, &bytes)
}

/// Reads only the header of a checkpoint.
pub fn read_checkpoint_header(path: &Path) -> Result<(CheckpointHeader, usize)> {
    let bytes = read_bytes(path)?;
    parse_checkpoint_header(path, &bytes)
}

fn parse_checkpoint_header(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let mut lines = Vec::new();
    let mut offset = 0;
    loop {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "unterminated checkpoint header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        offset += nl + 1;
        if lines.is_empty() && line.trim() != CHECKPOINT_MAGIC {
            return Err(Error::format(
                path,
                format!("expected magic `{CHECKPOINT_MAGIC}`, found `{}`", line.trim()),
            ));
        }
        if line.trim() == "end" {
            break;
        }
        lines.push(line);
    }
    Ok((CheckpointHeader::parse(path, &lines[1..])?, offset))
}

fn params_for_shape(shape: &NetworkShape) -> Result<NetworkParams> {
    NetworkParams::init(&NetworkConfig {
        stages: shape.stages,
        blocks: shape.blocks,
        filters: shape.filters,
        filter_size: shape.filter_size,
        c2_filter_size: shape.c2_filter_size,
        plf_points: shape.plf_points,
        weight_sharing: shape.weight_sharing,
        init: FilterInit::Random,
        ..NetworkConfig::default()
    })
}

pub fn read_checkpoint(path: &Path) -> Result<(NetworkParams, DescriptorConfig)> {
    let bytes = read_bytes(path)?;
    let (header, offset) = parse_checkpoint_header(path, &bytes)?;
    let mut theta = params_for_shape(&header.shape).map_err(|e| Error::format(path, e.to_string()))?;
    let payload = &bytes[offset..];
    if theta.len() != header.n_params || payload.len() != header.n_params * 8 {
        return Err(Error::format(
            path,
            format!(
                "header declares {} parameters, shape needs {}, payload holds {} bytes",
                header.n_params,
                theta.len(),
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    theta.assign_flat(&values)?;
    Ok((theta, header.dcfg))
}

/// Reads a checkpoint and rejects it unless its header equals `expected`,
/// reporting the differing fields.
pub fn read_checkpoint_expecting(path: &Path, expected: &CheckpointHeader) -> Result<NetworkParams> {
    let (found, _) = read_checkpoint_header(path)?;
    let diff = expected.diff(&found);
    if !diff.is_empty() {
        return Err(Error::format(path, format!("checkpoint header mismatch:\n  {}", diff.join("\n  "))));
    }
    Ok(read_checkpoint(path)?.0)
}

/// Maps `[0, 1]` linearly to 16-bit grayscale, clamping outside values.
pub fn write_png(path: &Path, img: &RealImage) -> Result<()> {
    let (h, w) = img.dims();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut data = Vec::with_capacity(h * w * 2);
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8- or 16-bit grayscale PNG into `[0, 1]`.
pub fn read_png(path: &Path) -> Result<RealImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|i| buf[i * info.line_size..i * info.line_size + w].to_vec())
            .map(|b| b as f64 / 255.0)
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|i| {
                let row = &buf[i * info.line_size..i * info.line_size + 2 * w];
                row.chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
                    .collect::<Vec<_>>()
            })
            .collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    RealImage::from_vec(h, w, data)
}

/// `step,nmse` rows.
pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = String::from("step,nmse\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:e}");
    }
    write_bytes(path, out.as_bytes())
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Appends a line, creating the file if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{make_mask, make_phantom};

    #[test]
    fn complex_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("img.v2");
        let img = ComplexImage::from_fn(5, 7, |i, j| C64::new(i as f64 * 0.25, -(j as f64) / 3.0));
        write_complex(&base, &img).unwrap();
        assert!(dir.path().join("img.v2.hdr").exists());
        let back = read_complex(&base).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(a.re as f32 as f64, b.re);
            assert_eq!(a.im as f32 as f64, b.im);
        }
        let text = fs::read_to_string(dir.path().join("img.v2.hdr")).unwrap();
        assert_eq!(text, "cplx v1\n5 7\n");
    }

    #[test]
    fn complex_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("x");
        write_complex(&base, &ComplexImage::zeros(4, 4)).unwrap();
        fs::write(binary_path(&base), [0u8; 10]).unwrap();
        assert!(matches!(read_complex(&base), Err(Error::Format { .. })));
        assert!(matches!(read_complex(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m");
        let mask = make_mask(MaskPattern::Radial, 64, 64, 0.3, 7).unwrap();
        write_mask(&base, &mask).unwrap();
        assert_eq!(read_mask(&base).unwrap(), mask);
        let hdr = fs::read_to_string(header_path(&base)).unwrap();
        assert!(hdr.starts_with("mask v1\n64 64 0.3 7 radial\nachieved "));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let dcfg = DescriptorConfig::default();
        for sharing in [false, true] {
            let cfg = NetworkConfig {
                stages: 3,
                blocks: 2,
                filters: 4,
                plf_points: 11,
                weight_sharing: sharing,
                ..NetworkConfig::default()
            };
            let mut theta = NetworkParams::init(&cfg).unwrap();
            theta.stages[1].rho = 0.123456789;
            write_checkpoint(&path, &theta, &dcfg).unwrap();
            let (back, dback) = read_checkpoint(&path).unwrap();
            assert_eq!(back, theta);
            assert_eq!(dback, dcfg);
        }
        let other = NetworkParams::init(&NetworkConfig {
            stages: 4,
            blocks: 2,
            filters: 4,
            plf_points: 11,
            weight_sharing: true,
            ..NetworkConfig::default()
        })
        .unwrap();
        let expected = CheckpointHeader::new(&other, &dcfg);
        match read_checkpoint_expecting(&path, &expected) {
            Err(Error::Format { msg, .. }) => {
                assert!(msg.contains("stages: expected 4, found 3"), "{msg}");
            }
            r => panic!("expected mismatch, got {r:?}"),
        }
        let mut bytes = fs::read(&path).unwrap();
        bytes[7] = b'9';
        fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn png_round_trip_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let img = make_phantom(32, 32).unwrap().magnitude();
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn png_reads_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p8.png");
        let file = File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 3, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(&[0, 51, 255, 102, 153, 204]).unwrap();
        wr.finish().unwrap();
        let img = read_png(&path).unwrap();
        assert_eq!(img.dims(), (2, 3));
        assert_eq!(img.get(0, 2), 1.0);
        assert!((img.get(0, 1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn loss_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[0.5, 0.25]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "step,nmse\n0,5e-1\n1,2.5e-1\n");
    }
}
