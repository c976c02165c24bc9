//! On-disk dataset container: `manifest.json` plus `records.bin`, a run of
//! fixed-size little-endian `f32` records.
//!
//! Record layout: PPG block (`4 x T`), accelerometry block (`3 x T`), beat
//! count, `MAX_BEATS` interval slots (zero padded), then HR, SDNN, RMSSD.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::synth::{self, labels_from_rr, SegmentPair, SynthConfig, ACCEL_CHANNELS, PPG_CHANNELS};

pub const MAX_BEATS: usize = 256;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    pub segments_per_participant: usize,
}

impl DatasetSplit {
    /// Participant-level split; the train share is `round(n * fraction)`.
    pub fn new(participants: usize, segments: usize, fraction: f64, seed: u64) -> Self {
        let mut ids: Vec<u32> = (0..participants as u32).collect();
        ids.shuffle(&mut synth::cell_rng(seed, u32::MAX, u32::MAX));
        let n_train = ((participants as f64 * fraction).round() as usize).clamp(1, participants - 1);
        let mut train = ids[..n_train].to_vec();
        let mut test = ids[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self { train, test, segments_per_participant: segments }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordIndex {
    pub participant_id: u32,
    pub segment_id: u32,
    pub beats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub samples_per_channel: usize,
    pub record_floats: usize,
    pub split: DatasetSplit,
    pub profiles: Vec<synth::ParticipantProfile>,
    pub records: Vec<RecordIndex>,
}

/// All segments of a generated dataset, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub segments: Vec<SegmentPair>,
}

fn record_floats(t: usize) -> usize {
    (PPG_CHANNELS + ACCEL_CHANNELS) * t + 1 + MAX_BEATS + 3
}

impl Dataset {
    /// Generates every `(participant, segment)` cell. Output is a pure
    /// function of `cfg`.
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let profiles = synth::make_profiles(cfg.participants, cfg.seed);
        let split = DatasetSplit::new(cfg.participants, cfg.segments, cfg.train_fraction, cfg.seed);
        let mut segments = Vec::with_capacity(cfg.participants * cfg.segments);
        for p in &profiles {
            for s in 0..cfg.segments as u32 {
                let seg = synth::gen_segment(cfg, p, s)?;
                if seg.rr.len() > MAX_BEATS {
                    return Err(CoreError::Data(format!("{} beats exceed the record capacity", seg.rr.len())));
                }
                segments.push(seg);
            }
        }
        let records = segments
            .iter()
            .map(|s| RecordIndex { participant_id: s.participant_id, segment_id: s.segment_id, beats: s.rr.len() })
            .collect();
        let t = cfg.out_samples();
        let manifest = Manifest {
            config: cfg.clone(),
            seed: cfg.seed,
            samples_per_channel: t,
            record_floats: record_floats(t),
            split,
            profiles,
            records,
        };
        Ok(Self { manifest, segments })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let rec_path = dir.join(RECORDS_FILE);
        let mut bytes = Vec::with_capacity(self.segments.len() * self.manifest.record_floats * 4);
        for s in &self.segments {
            let mut rec: Vec<f32> = Vec::with_capacity(self.manifest.record_floats);
            rec.extend_from_slice(&s.ppg);
            rec.extend_from_slice(&s.accel);
            rec.push(s.rr.len() as f32);
            rec.extend(s.rr.iter().map(|&r| r as f32));
            rec.resize(rec.len() + MAX_BEATS - s.rr.len(), 0.0);
            rec.extend([s.labels.hr as f32, s.labels.sdnn as f32, s.labels.rmssd as f32]);
            debug_assert_eq!(rec.len(), self.manifest.record_floats);
            bytes.extend(rec.iter().flat_map(|v| v.to_le_bytes()));
        }
        write_atomic(&rec_path, &bytes)?;
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| CoreError::json(&dir.join(MANIFEST_FILE), e))?;
        write_atomic(&dir.join(MANIFEST_FILE), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read(&mpath).map_err(|e| CoreError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| CoreError::json(&mpath, e))?;
        let rpath = dir.join(RECORDS_FILE);
        let bytes = fs::read(&rpath).map_err(|e| CoreError::io(&rpath, e))?;
        let t = manifest.samples_per_channel;
        let rf = manifest.record_floats;
        if rf != record_floats(t) || bytes.len() != manifest.records.len() * rf * 4 {
            return Err(CoreError::Data(format!("{}: size does not match the manifest", rpath.display())));
        }
        let mut segments = Vec::with_capacity(manifest.records.len());
        for (idx, chunk) in manifest.records.iter().zip(bytes.chunks_exact(rf * 4)) {
            let rec: Vec<f32> = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let (ppg, rest) = rec.split_at(PPG_CHANNELS * t);
            let (accel, rest) = rest.split_at(ACCEL_CHANNELS * t);
            let beats = rest[0] as usize;
            if beats != idx.beats || beats > MAX_BEATS {
                return Err(CoreError::Data(format!("record {}/{}: beat count mismatch", idx.participant_id, idx.segment_id)));
            }
            let rr: Vec<f64> = rest[1..1 + beats].iter().map(|&v| v as f64).collect();
            let stored = &rest[1 + MAX_BEATS..];
            let labels = labels_from_rr(&rr)?;
            if [labels.hr, labels.sdnn, labels.rmssd].iter().zip(stored).any(|(&a, &b)| a as f32 != b) {
                return Err(CoreError::Data(format!(
                    "record {}/{}: stored labels disagree with the beat intervals",
                    idx.participant_id, idx.segment_id
                )));
            }
            segments.push(SegmentPair {
                participant_id: idx.participant_id,
                segment_id: idx.segment_id,
                ppg: ppg.to_vec(),
                accel: accel.to_vec(),
                rr,
                labels,
            });
        }
        Ok(Self { manifest, segments })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.manifest.split
    }

    /// Indices of all segments whose participant is in `ids`.
    pub fn indices_of(&self, ids: &[u32]) -> Vec<usize> {
        let set: std::collections::HashSet<u32> = ids.iter().copied().collect();
        (0..self.segments.len()).filter(|&i| set.contains(&self.segments[i].participant_id)).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(&self.manifest.split.train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(&self.manifest.split.test)
    }

    /// Segment indices grouped by participant, in ascending id order.
    pub fn by_participant(&self, indices: &[usize]) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            map.entry(self.segments[i].participant_id).or_default().push(i);
        }
        map
    }

    pub fn trait_of(&self, participant: u32) -> bool {
        self.manifest.profiles[participant as usize].binary_trait
    }

    pub fn samples_per_channel(&self) -> usize {
        self.manifest.samples_per_channel
    }
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CoreError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}
