//! Binary dataset and checkpoint formats plus CSV exports.
//!
//! All integers and floats are little-endian. Files are written to a
//! temporary sibling and renamed into place, so a reader never sees a
//! partial file.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters, NormStats};
use crate::physics::{ParticleState, SystemKind, SystemSpec, Trajectory};
use crate::training::{TrainRecord, TrainingConfig};

pub const DATASET_MAGIC: &[u8; 8] = b"GNSTDS01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNSTCK01";
pub const DATASET_HEADER_LEN: usize = 60;

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8).map_err(|_| self.fail("file too short for magic"))?;
        if got != expected {
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

/// Simulation settings stored in a dataset header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub system: SystemKind,
    pub n: usize,
    pub t_len: usize,
    pub n_traj: usize,
    pub dt_effective: f64,
    pub constant: f64,
    pub intensity: f64,
    pub softening: f64,
}

impl DatasetHeader {
    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            system: self.system,
            constant: self.constant,
            dt: self.dt_effective,
            softening: self.softening,
            intensity: self.intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl DatasetFile {
    /// Wraps trajectories that share system, size, length and time step.
    pub fn new(spec: &SystemSpec, trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::invalid("a dataset needs at least one trajectory"))?;
        let (n, t_len, dt) = (first.n(), first.len(), first.dt_effective());
        for t in &trajectories {
            if t.system() != spec.system || t.n() != n || t.len() != t_len || t.dt_effective() != dt {
                return Err(Error::invalid(
                    "dataset trajectories differ in system, size, length or time step",
                ));
            }
        }
        Ok(Self {
            header: DatasetHeader {
                system: spec.system,
                n,
                t_len,
                n_traj: trajectories.len(),
                dt_effective: dt,
                constant: spec.constant,
                intensity: spec.intensity,
                softening: spec.softening,
            },
            trajectories,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let d = h.system.feature_dim();
        let mut out = Vec::with_capacity(DATASET_HEADER_LEN + 8 * h.n_traj * h.t_len * h.n * d);
        out.extend_from_slice(DATASET_MAGIC);
        for (v, what) in [
            (h.system.code() as usize, "system"),
            (h.n, "n"),
            (d, "d"),
            (h.t_len, "T"),
            (h.n_traj, "trajectory count"),
        ] {
            out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
        }
        for v in [h.dt_effective, h.constant, h.intensity, h.softening] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.trajectories {
            for s in t.states() {
                for v in s.features() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(DATASET_MAGIC)?;
        let code = r.u32()?;
        let system = SystemKind::from_code(code).ok_or_else(|| r.fail(format!("unknown system code {code}")))?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let t_len = r.u32()? as usize;
        let n_traj = r.u32()? as usize;
        if d != system.feature_dim() {
            return Err(r.fail(format!("{system} has {} features, header says {d}", system.feature_dim())));
        }
        if n == 0 || t_len < 2 || n_traj == 0 {
            return Err(r.fail(format!("empty dataset (n={n}, T={t_len}, trajectories={n_traj})")));
        }
        let header = DatasetHeader {
            system,
            n,
            t_len,
            n_traj,
            dt_effective: r.f64()?,
            constant: r.f64()?,
            intensity: r.f64()?,
            softening: r.f64()?,
        };
        let expected = (n_traj as u128) * (t_len as u128) * (n as u128) * (d as u128) * 8 + DATASET_HEADER_LEN as u128;
        if bytes.len() as u128 != expected {
            return Err(r.fail(format!("file is {} bytes, header implies {expected}", bytes.len())));
        }
        let mut trajectories = Vec::with_capacity(n_traj);
        for k in 0..n_traj {
            let mut states = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                let f = (0..n * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                states.push(ParticleState::new(system, n, f).map_err(|e| r.fail(format!("trajectory {k}: {e}")))?);
            }
            trajectories.push(
                Trajectory::new(states, header.dt_effective).map_err(|e| r.fail(format!("trajectory {k}: {e}")))?,
            );
        }
        r.finish()?;
        Ok(Self { header, trajectories })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Configuration block of a checkpoint, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub system: SystemKind,
    pub feature_dim: usize,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParameters,
}

impl Checkpoint {
    pub fn new(
        system: SystemKind,
        model: ModelConfig,
        training: TrainingConfig,
        params: ModelParameters,
        record: Option<&TrainRecord>,
    ) -> Result<Self> {
        if system.static_mask() != model.static_feature_mask.as_slice() {
            return Err(Error::Incompatible(format!("model mask does not match {system}")));
        }
        model.check_params(&params)?;
        Ok(Self {
            meta: CheckpointMeta {
                system,
                feature_dim: system.feature_dim(),
                seed: training.seed,
                model,
                training,
                norm_stats: params.norm.clone(),
                best_epoch: record.map(|r| r.best_epoch),
            },
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let named = self.params.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&to_u32(json.len(), "config length")?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&to_u32(named.len(), "tensor count")?.to_le_bytes());
        for (name, _, t) in named {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::invalid("tensor rank too large"))?;
            out.push(ndim);
            for &dim in t.shape() {
                out.extend_from_slice(&to_u32(dim, "tensor dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let json_len = r.u32()? as usize;
        let json = r.take(json_len)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| r.fail(format!("config JSON: {e}")))?;
        if meta.feature_dim != meta.system.feature_dim() || meta.model.feature_dim() != meta.feature_dim {
            return Err(r.fail("feature dimension inconsistent with system"));
        }
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail("tensor name is not UTF-8"))?
                .to_string();
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(r.fail(format!("duplicate tensor '{name}'")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len > bytes.len() / 8 {
                return Err(r.fail(format!("tensor '{name}' larger than the file")));
            }
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        r.finish()?;

        let mut params = ModelParameters::zeros(meta.feature_dim, meta.model.hidden_width, meta.norm_stats.clone());
        let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        if expected.len() != tensors.len() {
            return Err(r.fail(format!("{} tensors, expected {}", tensors.len(), expected.len())));
        }
        let mut ordered = Vec::with_capacity(expected.len());
        for name in &expected {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| r.fail(format!("missing tensor '{name}'")))?;
            ordered.push(tensors.swap_remove(pos).1);
        }
        params.set_tensors(ordered).map_err(|e| r.fail(e.to_string()))?;
        meta.model.check_params(&params).map_err(|e| r.fail(e.to_string()))?;
        Ok(Self { meta, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// `epoch,train_loss,val_loss` with one row per epoch.
pub fn training_log_csv(record: &TrainRecord) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in &record.epochs {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
    }
    out
}

/// One labelled trajectory for CSV export.
pub struct CsvTrajectory<'a> {
    pub source: &'a str,
    pub index: usize,
    pub states: &'a [ParticleState],
}

/// `source,traj,t,particle,<features>` with one row per particle per stamp.
pub fn trajectories_csv(system: SystemKind, items: &[CsvTrajectory<'_>]) -> String {
    let mut out = String::from("source,traj,t,particle");
    for name in system.feature_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for item in items {
        for (t, s) in item.states.iter().enumerate() {
            for i in 0..s.n() {
                let _ = write!(out, "{},{},{},{}", item.source, item.index, t, i);
                for v in s.particle(i) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::physics::{generate_dataset, trajectory_rng, SplitCounts};
    use crate::training::EpochRecord;

    fn small(system: SystemKind) -> DatasetFile {
        let spec = SystemSpec::new(system);
        let ds = generate_dataset(4, &spec, 3, SplitCounts { train: 2, val: 0, test: 0 }, 9, Exec::Sequential).unwrap();
        DatasetFile::new(&spec, ds.train).unwrap()
    }

    fn checkpoint() -> Checkpoint {
        let model = ModelConfig {
            hidden_width: 7,
            ..ModelConfig::new(SystemKind::Coulomb)
        };
        let params = ModelParameters::init(6, 7, NormStats::identity(6), &mut trajectory_rng(4, 0));
        Checkpoint::new(SystemKind::Coulomb, model, TrainingConfig::default(), params, None).unwrap()
    }

    #[test]
    fn dataset_layout() {
        let f = small(SystemKind::Gravity);
        let b = f.to_bytes().unwrap();
        assert_eq!(b.len(), 60 + 8 * 2 * 3 * 4 * 5);
        assert_eq!(&b[..8], b"GNSTDS01");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 0.01);
        assert_eq!(f64::from_le_bytes(b[36..44].try_into().unwrap()), 2.0);
        assert_eq!(f64::from_le_bytes(b[44..52].try_into().unwrap()), 0.42);
        assert_eq!(f64::from_le_bytes(b[52..60].try_into().unwrap()), 0.01);
        let first = f.trajectories[0].first().features()[0];
        assert_eq!(f64::from_le_bytes(b[60..68].try_into().unwrap()), first);
        let last = *f.trajectories[1].last().features().last().unwrap();
        assert_eq!(f64::from_le_bytes(b[b.len() - 8..].try_into().unwrap()), last);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for system in [SystemKind::Gravity, SystemKind::Coulomb] {
            let f = small(system);
            let p = dir.path().join(format!("{system}.bin"));
            f.write(&p).unwrap();
            let back = DatasetFile::read(&p).unwrap();
            assert_eq!(back, f);
            assert_eq!(back.to_bytes().unwrap(), fs::read(&p).unwrap());
        }
    }

    #[test]
    fn dataset_rejects_corruption() {
        let b = small(SystemKind::Gravity).to_bytes().unwrap();
        let p = Path::new("x.bin");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(DatasetFile::from_bytes(&bad, p).unwrap_err().to_string().contains("magic"));
        assert!(DatasetFile::from_bytes(&b[..b.len() - 1], p).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(DatasetFile::from_bytes(&extra, p).is_err());
        let mut wrong_d = b.clone();
        wrong_d[16] = 6;
        assert!(DatasetFile::from_bytes(&wrong_d, p).is_err());
        let mut wrong_sys = b.clone();
        wrong_sys[8] = 7;
        assert!(DatasetFile::from_bytes(&wrong_sys, p).is_err());
        assert!(DatasetFile::from_bytes(&b[..5], p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = checkpoint();
        let p = dir.path().join("model.ckpt");
        ck.write(&p).unwrap();
        let back = Checkpoint::read(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), fs::read(&p).unwrap());
        let b = fs::read(&p).unwrap();
        assert_eq!(&b[..8], b"GNSTCK01");
        let json_len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&b[12..12 + json_len]).unwrap();
        assert_eq!(meta["seed"], 0);
        assert_eq!(meta["model"]["hidden_width"], 7);
        let count = u32::from_le_bytes(b[12 + json_len..16 + json_len].try_into().unwrap());
        assert_eq!(count, 24);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let b = checkpoint().to_bytes().unwrap();
        let p = Path::new("m.ckpt");
        let mut bad = b.clone();
        bad[7] = b'9';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3], p).is_err());
        // Rename a tensor so one is missing.
        let json_len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let mut renamed = b.clone();
        renamed[12 + json_len + 4 + 2] = b'X';
        assert!(Checkpoint::from_bytes(&renamed, p).is_err());
        let mut nan = b.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan, p).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/a.bin"), b"x").is_err());
    }

    #[test]
    fn csv_exports() {
        let rec = TrainRecord {
            epochs: vec![
                EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25 },
                EpochRecord { epoch: 2, train_loss: 0.125, val_loss: 1e-20 },
            ],
            best_epoch: 2,
        };
        assert_eq!(training_log_csv(&rec), "epoch,train_loss,val_loss\n1,0.5,0.25\n2,0.125,0.00000000000000000001\n");
        let f = small(SystemKind::Coulomb);
        let t = &f.trajectories[0];
        let csv = trajectories_csv(
            SystemKind::Coulomb,
            &[
                CsvTrajectory { source: "predicted", index: 0, states: t.states() },
                CsvTrajectory { source: "truth", index: 0, states: t.states() },
            ],
        );
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2 * 3 * 4 + 1);
        assert_eq!(lines[0], "source,traj,t,particle,m,c,x,y,vx,vy");
        let row: Vec<f64> = lines[2].split(',').skip(4).map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, t.first().particle(1));
    }
}
