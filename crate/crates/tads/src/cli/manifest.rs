//! Run manifest, artifact checksums, atomic writes, and the output lock.
//!
//! The manifest is the reproducibility record of a run: config hash, seeds,
//! and per-stage outputs with checksums. Two runs with the same config and
//! master seed produce byte-identical manifests, so anything volatile
//! (wall-clock timings) lives in a sidecar file the manifest only names.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::sha256_file;
use crate::error::{Result, TadsError};
use crate::numeric::{Activation, Mlp};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const TIMINGS_FILE: &str = "run_timings.json";
pub const LOCK_FILE: &str = ".lock";

/// One output file of a stage, path relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest over everything the stage result depends on: engine version,
    /// master seed, the stage's config section, and upstream artifact
    /// checksums. An unchanged fingerprint with intact outputs makes a
    /// re-run a no-op.
    pub fingerprint: String,
    /// Child seed of the stage's derived random stream.
    pub stream_seed: u64,
    pub outputs: Vec<ArtifactRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub config_sha256: String,
    pub master_seed: u64,
    /// Corpus checksum, recorded by the ingest stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_checksum: Option<String>,
    /// Sidecar holding wall-clock per stage; kept out of this file so the
    /// manifest itself reproduces bit for bit.
    pub timings_path: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn fresh(config_sha256: String, master_seed: u64) -> Self {
        RunManifest {
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            master_seed,
            input_checksum: None,
            timings_path: TIMINGS_FILE.to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(out_dir: &Path) -> Result<Option<RunManifest>> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| TadsError::io(&path, e))?;
        let manifest = serde_json::from_slice(&bytes)
            .map_err(|e| TadsError::json(format!("run manifest {}", path.display()), e))?;
        Ok(Some(manifest))
    }

    pub fn store(&self, out_dir: &Path) -> Result<()> {
        write_json_atomic(&out_dir.join(MANIFEST_FILE), self)
    }

    /// True when the recorded stage matches the fingerprint and all of its
    /// output files still exist with their recorded checksums.
    pub fn stage_up_to_date(&self, stage: &str, fingerprint: &str, out_dir: &Path) -> bool {
        let Some(record) = self.stages.get(stage) else {
            return false;
        };
        if record.fingerprint != fingerprint {
            return false;
        }
        record.outputs.iter().all(|a| {
            sha256_file(&out_dir.join(&a.path)).map(|h| h == a.sha256).unwrap_or(false)
        })
    }

    /// True when the stage ran and its outputs are still on disk, whatever
    /// their fingerprint. This is the dependency-gate notion of "present".
    pub fn stage_present(&self, stage: &str, out_dir: &Path) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|r| r.outputs.iter().all(|a| out_dir.join(&a.path).exists()))
    }
}

/// Wall-clock sidecar, one entry per executed stage. Overwritten freely;
/// never part of any fingerprint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub stages: BTreeMap<String, u64>,
}

impl RunTimings {
    pub fn load(out_dir: &Path) -> RunTimings {
        let path = out_dir.join(TIMINGS_FILE);
        std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    pub fn record(&mut self, stage: &str, wall_ms: u64, out_dir: &Path) -> Result<()> {
        self.stages.insert(stage.to_string(), wall_ms);
        write_json_atomic(&out_dir.join(TIMINGS_FILE), self)
    }
}

/// Serializes to pretty JSON with a trailing newline and renames into
/// place, so a crash mid-write never leaves a torn artifact.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| TadsError::json(path.display().to_string(), e))?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes)
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path
        .file_name()
        .ok_or_else(|| TadsError::InvalidConfig(format!("{} has no file name", path.display())))?
        .to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| TadsError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| TadsError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| TadsError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| TadsError::json(path.display().to_string(), e))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    use sha2::Digest;
    let mut hasher = sha2::Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Exclusive claim on a run directory for the lifetime of the guard. A
/// second acquirer fails with a lock error instead of interleaving writes.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(out_dir: &Path) -> Result<LockGuard> {
        let path = out_dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = write!(file, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(TadsError::Locked(out_dir.to_path_buf()))
            }
            Err(e) => Err(TadsError::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Serializable form of one trained network: layer widths, activation
/// codes, and the flat parameter vector in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSnapshot {
    pub dims: Vec<usize>,
    pub activations: Vec<u8>,
    pub params: Vec<f64>,
}

impl MlpSnapshot {
    pub fn of(net: &Mlp) -> MlpSnapshot {
        MlpSnapshot {
            dims: net.layer_dims(),
            activations: net.activations().iter().map(|a| a.code()).collect(),
            params: net.params_flat(),
        }
    }

    pub fn restore(&self) -> Result<Mlp> {
        let acts: Vec<Activation> = self
            .activations
            .iter()
            .map(|&c| Activation::from_code(c))
            .collect::<Result<_>>()?;
        let mut net = Mlp::zeros(&self.dims, &acts)?;
        net.set_params_flat(&self.params)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_json_atomic(&path, &vec![1, 2, 3]).unwrap();
        let listed: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(listed, vec!["x.json"]);
        let back: Vec<i32> = read_json(&path).unwrap();
        assert_eq!(back, vec![1, 2, 3]);
    }

    #[test]
    fn lock_excludes_second_acquirer_and_releases_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let guard = LockGuard::acquire(dir.path()).unwrap();
        match LockGuard::acquire(dir.path()) {
            Err(TadsError::Locked(p)) => assert_eq!(p, dir.path()),
            other => panic!("expected lock error, got {other:?}"),
        }
        drop(guard);
        LockGuard::acquire(dir.path()).unwrap();
    }

    #[test]
    fn manifest_round_trips_and_tracks_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::fresh("abc".into(), 7);
        let artifact = dir.path().join("out.json");
        write_json_atomic(&artifact, &1u32).unwrap();
        manifest.stages.insert(
            "dedup".into(),
            StageRecord {
                fingerprint: "fp1".into(),
                stream_seed: 11,
                outputs: vec![ArtifactRef {
                    path: "out.json".into(),
                    sha256: sha256_file(&artifact).unwrap(),
                }],
            },
        );
        manifest.store(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(loaded, manifest);

        assert!(loaded.stage_up_to_date("dedup", "fp1", dir.path()));
        assert!(!loaded.stage_up_to_date("dedup", "fp2", dir.path()));
        assert!(!loaded.stage_up_to_date("quality", "fp1", dir.path()));
        assert!(loaded.stage_present("dedup", dir.path()));

        // Tampering with the artifact invalidates the record.
        write_json_atomic(&artifact, &2u32).unwrap();
        assert!(!loaded.stage_up_to_date("dedup", "fp1", dir.path()));
        assert!(loaded.stage_present("dedup", dir.path()));

        std::fs::remove_file(&artifact).unwrap();
        assert!(!loaded.stage_present("dedup", dir.path()));
    }

    #[test]
    fn missing_manifest_loads_as_none() {
        let dir = tempfile::tempdir().unwrap();
        assert!(RunManifest::load(dir.path()).unwrap().is_none());
    }

    #[test]
    fn mlp_snapshot_round_trips_exactly() {
        let stream = RngStream::new(3, "snapshot-test");
        let net = Mlp::seeded(
            &[4, 8, 1],
            &[Activation::Relu, Activation::Sigmoid],
            &stream,
        )
        .unwrap();
        let snap = MlpSnapshot::of(&net);
        let back = snap.restore().unwrap();
        assert_eq!(back.layer_dims(), net.layer_dims());
        assert_eq!(back.activations(), net.activations());
        assert_eq!(back.params_flat(), net.params_flat());

        // Through JSON too, bit for bit.
        let json = serde_json::to_vec(&snap).unwrap();
        let snap2: MlpSnapshot = serde_json::from_slice(&json).unwrap();
        assert_eq!(snap2, snap);
    }

    #[test]
    fn corrupt_snapshot_is_rejected() {
        let snap = MlpSnapshot { dims: vec![2, 3], activations: vec![99], params: vec![0.0; 9] };
        assert!(snap.restore().is_err());
        let snap = MlpSnapshot { dims: vec![2, 3], activations: vec![0], params: vec![0.0; 4] };
        assert!(snap.restore().is_err());
    }

    #[test]
    fn timings_record_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = RunTimings::load(dir.path());
        t.record("dedup", 120, dir.path()).unwrap();
        let back = RunTimings::load(dir.path());
        assert_eq!(back.stages.get("dedup"), Some(&120));
    }
}
