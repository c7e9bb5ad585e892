//! Fleet dataset file format.
//!
//! ```text
//! offset  size        content
//! 0       8           magic "FLEETDS" followed by format version byte 0x01
//! 8       8           u64 LE: header length H in bytes
//! 16      H           UTF-8 JSON header (see `DatasetHeader`)
//! 16+H    ...         per system i, in order:
//!                        Ω_i * m f64 LE  regressors, row-major
//!                        Ω_i     f64 LE  measurements
//!         N * m f64   true parameters, present iff header.truth is set
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{GenConfig, RNG_NAME};
use crate::error::{FleetError, Result};
use crate::model::{FleetDataset, GroundTruth, SystemDataset};

pub const MAGIC: &[u8; 8] = b"FLEETDS\x01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthHeader {
    pub anomaly_tags: Vec<usize>,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub systems: usize,
    pub dim: usize,
    pub observations: Vec<usize>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub rng: Option<String>,
    pub config: Option<GenConfig>,
    pub truth: Option<TruthHeader>,
}

impl DatasetHeader {
    pub fn describe(fleet: &FleetDataset, config: Option<&GenConfig>) -> Self {
        Self {
            format: "fleet-dataset".into(),
            version: 1,
            systems: fleet.len(),
            dim: fleet.dim(),
            observations: fleet.systems().iter().map(|s| s.observations()).collect(),
            seed: config.map(|c| c.seed),
            config_hash: config.map(GenConfig::hash),
            rng: config.map(|_| RNG_NAME.to_string()),
            config: config.cloned(),
            truth: fleet.truth().map(|t| TruthHeader {
                anomaly_tags: t.tags(),
                noise_variance: t.noise_variance,
            }),
        }
    }
}

fn put_f64s<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_fleet(fleet: &FleetDataset, config: Option<&GenConfig>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&DatasetHeader::describe(fleet, config))?;
    let mut out = Vec::with_capacity(16 + header.len() + fleet.total_observations() * (fleet.dim() + 1) * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for s in fleet.systems() {
        let phi = s.regressors();
        for t in 0..phi.nrows() {
            put_f64s(&mut out, phi.row(t).iter());
        }
        put_f64s(&mut out, s.measurements().iter());
    }
    if let Some(t) = fleet.truth() {
        for p in &t.parameters {
            put_f64s(&mut out, p.iter());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FleetError::Format("dataset file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FleetError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn decode_fleet(bytes: &[u8]) -> Result<(FleetDataset, DatasetHeader)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(FleetError::Format("not a fleet dataset (bad magic)".into()));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: DatasetHeader = serde_json::from_slice(r.take(len)?)?;
    if header.version != 1 || header.observations.len() != header.systems {
        return Err(FleetError::Format("unsupported or inconsistent dataset header".into()));
    }
    let m = header.dim;
    let mut systems = Vec::with_capacity(header.systems);
    for &omega in &header.observations {
        let phi = r.f64s(omega * m)?;
        let y = r.f64s(omega)?;
        systems.push(SystemDataset::new(
            DMatrix::from_row_slice(omega, m, &phi),
            DVector::from_vec(y),
        )?);
    }
    let truth = match &header.truth {
        Some(t) => {
            let params = r.f64s(header.systems * m)?;
            Some(GroundTruth {
                parameters: params.chunks(m.max(1)).map(|c| c.to_vec()).collect(),
                anomalies: t.anomaly_tags.iter().map(|&tag| tag.wrapping_sub(1)).collect(),
                noise_variance: t.noise_variance,
            })
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(FleetError::Format("trailing bytes after dataset".into()));
    }
    Ok((FleetDataset::new(systems, truth)?, header))
}

pub fn write_fleet(path: &Path, fleet: &FleetDataset, config: Option<&GenConfig>) -> Result<()> {
    fs::write(path, encode_fleet(fleet, config)?)?;
    Ok(())
}

pub fn read_fleet(path: &Path) -> Result<(FleetDataset, DatasetHeader)> {
    decode_fleet(&fs::read(path)?)
}

/// One CSV per system: `y,phi1,...,phim`, written as `system_0001.csv` etc.
pub fn export_csv(dir: &Path, fleet: &FleetDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in fleet.systems().iter().enumerate() {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("system_{:04}.csv", i + 1)))?);
        let cols: Vec<String> = (1..=s.dim()).map(|q| format!("phi{q}")).collect();
        writeln!(f, "y,{}", cols.join(","))?;
        for t in 0..s.observations() {
            write!(f, "{}", s.measurements()[t])?;
            for v in s.regressors().row(t).iter() {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_fleet;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = GenConfig::planted(4, 7, vec![0.3, -1.1], vec![2.0, 1.0], vec![3], 0.5, 42);
        let fleet = generate_fleet(&cfg).unwrap();
        let bytes = encode_fleet(&fleet, Some(&cfg)).unwrap();
        let (back, header) = decode_fleet(&bytes).unwrap();
        assert_eq!(back, fleet);
        assert_eq!(header.seed, Some(42));
        assert_eq!(header.config_hash.as_deref(), Some(cfg.hash().as_str()));
        assert_eq!(encode_fleet(&back, header.config.as_ref()).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let cfg = GenConfig::planted(2, 3, vec![1.0], vec![1.0], vec![], 0.1, 1);
        let bytes = encode_fleet(&generate_fleet(&cfg).unwrap(), None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_fleet(&bad), Err(FleetError::Format(_))));
        assert!(matches!(decode_fleet(&bytes[..bytes.len() - 3]), Err(FleetError::Format(_))));
    }

    #[test]
    fn csv_export_writes_one_file_per_system() {
        let cfg = GenConfig::planted(3, 5, vec![1.0, 2.0], vec![0.0, 0.0], vec![], 0.1, 2);
        let fleet = generate_fleet(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_csv(dir.path(), &fleet).unwrap();
        let text = fs::read_to_string(dir.path().join("system_0002.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "y,phi1,phi2");
        assert_eq!(lines.len(), 6);
        let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first[0], fleet.systems()[1].measurements()[0]);
    }
}
