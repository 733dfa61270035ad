use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnimalConfig, AnimalRecording, SynthConfig, SyntheticDataset, BEHAVIOR_HZ, NEURAL_HZ};
use crate::error::{Error, Result};
use crate::nart;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    behavior_hz: f64,
    neural_hz: f64,
    class_names: Vec<String>,
    config: SynthConfig,
    animals: Vec<AnimalConfig>,
    recordings: Vec<RecordingEntry>,
    checksums: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingEntry {
    animal_id: u32,
    trial: u32,
    poses: String,
    spikes: String,
    fluorescence: String,
    labels: Option<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `dataset` into `dir` (created if needed). Output depends only on the
/// dataset contents, so saving the same dataset twice gives identical bytes.
pub fn save_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checksums = BTreeMap::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<String> {
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        checksums.insert(name.clone(), sha256_hex(&bytes));
        Ok(name)
    };
    let mut recordings = Vec::with_capacity(dataset.recordings.len());
    for r in &dataset.recordings {
        let stem = format!("animal{:03}_trial{:03}", r.animal_id, r.trial);
        let labels = match &r.labels {
            Some(l) => Some(write(
                format!("{stem}_labels.nart"),
                nart::encode_u16(&[l.len()], l),
            )?),
            None => None,
        };
        recordings.push(RecordingEntry {
            animal_id: r.animal_id,
            trial: r.trial,
            poses: write(format!("{stem}_poses.nart"), nart::encode(&r.poses))?,
            spikes: write(format!("{stem}_spikes.nart"), nart::encode(&r.spikes))?,
            fluorescence: write(
                format!("{stem}_fluorescence.nart"),
                nart::encode(&r.fluorescence),
            )?,
            labels,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        behavior_hz: BEHAVIOR_HZ,
        neural_hz: NEURAL_HZ,
        class_names: dataset.class_names.clone(),
        config: dataset.config.clone(),
        animals: dataset.animals.clone(),
        recordings,
        checksums,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "missing schema_version".into(),
        })?;
    if version != SCHEMA_VERSION as u64 {
        return Err(Error::Version {
            what: path.display().to_string(),
            found: version as u32,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let expected = manifest.checksums.get(name).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: format!("no checksum listed for {name}"),
        })?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Checksum { path: p });
        }
        Ok(bytes)
    };
    let mut recordings = Vec::with_capacity(manifest.recordings.len());
    for r in &manifest.recordings {
        let labels = match &r.labels {
            Some(name) => Some(nart::decode_u16(&read(name)?, name)?.1),
            None => None,
        };
        recordings.push(AnimalRecording {
            animal_id: r.animal_id,
            trial: r.trial,
            poses: nart::decode(&read(&r.poses)?, &r.poses)?,
            spikes: nart::decode(&read(&r.spikes)?, &r.spikes)?,
            fluorescence: nart::decode(&read(&r.fluorescence)?, &r.fluorescence)?,
            labels,
        });
    }
    Ok(SyntheticDataset {
        config: manifest.config,
        animals: manifest.animals,
        recordings,
        class_names: manifest.class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_dataset;

    fn tiny() -> SyntheticDataset {
        generate_dataset(&SynthConfig {
            n_animals: 2,
            trials_per_animal: 1,
            trial_seconds: 10.0,
            pose_dim: 4,
            image_extent: 8,
            n_units: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn corrupt_byte_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let victim = dir.path().join("animal001_trial000_poses.nart");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&victim, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Checksum { path }) => assert_eq!(path, victim),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&m)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&m, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        // rewrite a payload and its checksum so only the length is wrong
        let name = "animal000_trial000_spikes.nart";
        let mut bytes = fs::read(dir.path().join(name)).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(dir.path().join(name), &bytes).unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
        manifest.checksums.insert(name.into(), sha256_hex(&bytes));
        fs::write(&m, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn unlabeled_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny().without_labels();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(!back.is_labeled());
        assert_eq!(back, ds);
    }
}
