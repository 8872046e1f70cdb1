//! On-disk formats. Binary files share one container layout:
//!
//! ```text
//! <header length in bytes, ASCII decimal>\n
//! <JSON header>
//! <payload: little-endian f64 values>
//! ```
//!
//! The header always carries a four-character `magic` and `dtype: "f64le"`.

use std::fs;
use std::io::Write;
use std::path::Path;

use proxnf_core::crt::{Measurements, SensorSchedule};
use proxnf_core::pounet::{NetArchitecture, PartitionNet, PounetField};
use proxnf_core::nalgebra::DMatrix;
use proxnf_core::{ImageStack, RoiMask, SpacetimeGrid};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const STACK_MAGIC: &str = "stk1";
pub const MEASUREMENT_MAGIC: &str = "msr1";
pub const CHECKPOINT_MAGIC: &str = "ckp1";
const DTYPE: &str = "f64le";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed header length prefix")]
    Prefix,
    #[error("bad magic at byte offset {offset}: expected {expected:?}, found {found:?}")]
    Magic {
        expected: &'static str,
        found: String,
        offset: usize,
    },
    #[error(transparent)]
    Header(#[from] serde_json::Error),
    #[error("unsupported dtype {0:?}")]
    Dtype(String),
    #[error("payload holds {got} bytes, header implies {expected}")]
    Payload { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] proxnf_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn encode(header: &impl Serialize, payload: impl IntoIterator<Item = f64>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = format!("{}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

#[derive(Deserialize)]
struct Tag {
    magic: String,
    dtype: String,
}

/// Splits a container, checking its magic; returns the header and payload.
fn decode<H: DeserializeOwned>(bytes: &[u8], magic: &'static str) -> Result<(H, Vec<f64>)> {
    let nl = bytes.iter().take(24).position(|&b| b == b'\n').ok_or(FormatError::Prefix)?;
    let len: usize = std::str::from_utf8(&bytes[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(FormatError::Prefix)?;
    let start = nl + 1;
    let header = bytes.get(start..start + len).ok_or(FormatError::Prefix)?;
    let tag: Tag = serde_json::from_slice(header)?;
    if tag.magic != magic {
        let needle = b"\"magic\"";
        let offset = header
            .windows(needle.len())
            .position(|w| w == needle)
            .map_or(start, |p| start + p);
        return Err(FormatError::Magic {
            expected: magic,
            found: tag.magic,
            offset,
        });
    }
    if tag.dtype != DTYPE {
        return Err(FormatError::Dtype(tag.dtype));
    }
    let parsed: H = serde_json::from_slice(header)?;
    let body = &bytes[start + len..];
    if !body.len().is_multiple_of(8) {
        return Err(FormatError::Payload {
            expected: body.len() / 8 * 8,
            got: body.len(),
        });
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((parsed, values))
}

fn check_payload(values: &[f64], expected: usize) -> Result<()> {
    if values.len() == expected {
        Ok(())
    } else {
        Err(FormatError::Payload {
            expected: expected * 8,
            got: values.len() * 8,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackHeader {
    magic: String,
    #[serde(rename = "M_s")]
    side: usize,
    #[serde(rename = "K")]
    frames: usize,
    #[serde(rename = "L_cm")]
    fov: f64,
    #[serde(rename = "T_s")]
    horizon: f64,
    dtype: String,
}

pub fn encode_stack(stack: &ImageStack) -> Result<Vec<u8>> {
    let g = stack.grid();
    let header = StackHeader {
        magic: STACK_MAGIC.into(),
        side: g.side(),
        frames: g.frames(),
        fov: g.fov(),
        horizon: g.horizon(),
        dtype: DTYPE.into(),
    };
    encode(&header, stack.coeffs().iter().copied())
}

pub fn decode_stack(bytes: &[u8]) -> Result<ImageStack> {
    let (h, values): (StackHeader, _) = decode(bytes, STACK_MAGIC)?;
    let grid = SpacetimeGrid::new(h.side, h.fov, h.frames, h.horizon)?;
    check_payload(&values, grid.pixels() * grid.frames())?;
    Ok(ImageStack::new(grid, DMatrix::from_vec(grid.pixels(), grid.frames(), values))?)
}

pub fn write_stack(path: &Path, stack: &ImageStack) -> Result<()> {
    write_file(path, &encode_stack(stack)?)
}

pub fn read_stack(path: &Path) -> Result<ImageStack> {
    decode_stack(&fs::read(path)?)
}

/// Acquisition description stored alongside the data so that the operator
/// can be rebuilt from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub grid: GridSpec,
    pub schedule: SensorSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub side: usize,
    pub fov: f64,
    pub frames: usize,
    pub horizon: f64,
}

impl GridSpec {
    pub fn of(grid: &SpacetimeGrid) -> Self {
        Self {
            side: grid.side(),
            fov: grid.fov(),
            frames: grid.frames(),
            horizon: grid.horizon(),
        }
    }

    pub fn build(&self) -> proxnf_core::Result<SpacetimeGrid> {
        SpacetimeGrid::new(self.side, self.fov, self.frames, self.horizon)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeasurementHeader {
    magic: String,
    #[serde(rename = "K")]
    frames: usize,
    #[serde(rename = "S")]
    sensors: usize,
    #[serde(rename = "I")]
    rings: usize,
    sigma: f64,
    rnl: f64,
    seed: Option<u64>,
    acquisition: Acquisition,
    dtype: String,
}

pub fn encode_measurements(meas: &Measurements, acq: &Acquisition) -> Result<Vec<u8>> {
    let header = MeasurementHeader {
        magic: MEASUREMENT_MAGIC.into(),
        frames: meas.frames(),
        sensors: meas.sensors,
        rings: meas.rings,
        sigma: meas.sigma,
        rnl: meas.rnl,
        seed: meas.seed,
        acquisition: acq.clone(),
        dtype: DTYPE.into(),
    };
    encode(&header, meas.data.iter().copied())
}

pub fn decode_measurements(bytes: &[u8]) -> Result<(Measurements, Acquisition)> {
    let (h, values): (MeasurementHeader, _) = decode(bytes, MEASUREMENT_MAGIC)?;
    let rows = h.sensors * h.rings;
    check_payload(&values, rows * h.frames)?;
    let mut meas = Measurements::new(DMatrix::from_vec(rows, h.frames, values), h.sensors, h.rings)?;
    meas.sigma = h.sigma;
    meas.rnl = h.rnl;
    meas.seed = h.seed;
    Ok((meas, h.acquisition))
}

pub fn write_measurements(path: &Path, meas: &Measurements, acq: &Acquisition) -> Result<()> {
    write_file(path, &encode_measurements(meas, acq)?)
}

pub fn read_measurements(path: &Path) -> Result<(Measurements, Acquisition)> {
    decode_measurements(&fs::read(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    architecture: NetArchitecture,
    #[serde(rename = "P")]
    partitions: usize,
    #[serde(rename = "M_s")]
    side: usize,
    grid: GridSpec,
    seed: u64,
    dtype: String,
}

/// Network parameters followed by the coefficient matrix (column-major).
pub fn encode_checkpoint(field: &PounetField, seed: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        architecture: field.net().architecture().clone(),
        partitions: field.partitions(),
        side: field.grid().side(),
        grid: GridSpec::of(field.grid()),
        seed,
        dtype: DTYPE.into(),
    };
    let payload = field.net().params().iter().chain(field.coeffs().iter()).copied();
    encode(&header, payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(PounetField, u64)> {
    let (h, mut values): (CheckpointHeader, _) = decode(bytes, CHECKPOINT_MAGIC)?;
    let grid = h.grid.build()?;
    let n_net = h.architecture.param_count();
    check_payload(&values, n_net + grid.pixels() * h.partitions)?;
    let coeffs = values.split_off(n_net);
    let net = PartitionNet::from_params(h.architecture, grid.horizon(), values)?;
    let c = DMatrix::from_vec(grid.pixels(), h.partitions, coeffs);
    Ok((PounetField::new(grid, net, c)?, h.seed))
}

pub fn write_checkpoint(path: &Path, field: &PounetField, seed: u64) -> Result<()> {
    write_file(path, &encode_checkpoint(field, seed)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(PounetField, u64)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Region of interest as JSON: the pixel list plus how it was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFile {
    pub side: usize,
    pub dilation: usize,
    pub pixels: Vec<usize>,
}

impl RoiFile {
    pub fn new(roi: &RoiMask, grid: &SpacetimeGrid, dilation: usize) -> Self {
        Self {
            side: grid.side(),
            dilation,
            pixels: roi.pixels().to_vec(),
        }
    }

    pub fn mask(&self, grid: &SpacetimeGrid) -> Result<RoiMask> {
        if self.side != grid.side() {
            return Err(proxnf_core::Error::GridMismatch("ROI side differs from the stack").into());
        }
        Ok(RoiMask::new(self.pixels.clone(), grid)?)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_file(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stack() -> ImageStack {
        let grid = SpacetimeGrid::new(3, 1.5, 2, 10.0).unwrap();
        let values: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        ImageStack::new(grid, DMatrix::from_vec(9, 2, values)).unwrap()
    }

    #[test]
    fn stack_layout_is_prefixed_json_then_column_major_payload() {
        let stack = sample_stack();
        let bytes = encode_stack(&stack).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let len: usize = std::str::from_utf8(&bytes[..nl]).unwrap().parse().unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[nl + 1..nl + 1 + len]).unwrap();
        assert_eq!(header["magic"], "stk1");
        assert_eq!(header["M_s"], 3);
        assert_eq!(header["K"], 2);
        assert_eq!(header["dtype"], "f64le");
        let payload = &bytes[nl + 1 + len..];
        assert_eq!(payload.len(), 18 * 8);
        // frame 1, pixel 0 sits right after the nine values of frame 0
        let v = f64::from_le_bytes(payload[72..80].try_into().unwrap());
        assert_eq!(v.to_bits(), stack.coeffs()[(0, 1)].to_bits());
        let back = decode_stack(&bytes).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn magic_mismatch_reports_offset() {
        let stack = sample_stack();
        let bytes = encode_stack(&stack).unwrap();
        let err = decode_measurements(&bytes).unwrap_err();
        match err {
            FormatError::Magic { expected, found, offset } => {
                assert_eq!(expected, "msr1");
                assert_eq!(found, "stk1");
                assert_eq!(&bytes[offset..offset + 7], b"\"magic\"");
            }
            other => panic!("{other}"),
        }
        assert!(matches!(decode_stack(b"xx\n{}"), Err(FormatError::Prefix)));
        let mut short = bytes.clone();
        short.truncate(bytes.len() - 8);
        assert!(matches!(decode_stack(&short), Err(FormatError::Payload { .. })));
    }
}
