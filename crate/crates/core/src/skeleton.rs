//! Skeleton data ingestion: the NTU `.skeleton` text format, the canonical
//! line-delimited dataset format, and the evaluation protocol splits.
//!
//! Canonical format: a header line `msgn-canonical <version>`, then one
//! record per line with space-separated fields in this order:
//! version, dataset, label, subject, camera, setup, body, source, T, J,
//! followed by the 3*T*J coordinates (frame-major, joint-minor, xyz last).
//! Coordinates are stored at 32-bit precision with shortest round-trip
//! formatting, so write -> load is bit-exact.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CANONICAL_VERSION: u32 = 1;

/// One person's labeled joint trajectory plus capture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub frames: usize,
    pub joints: usize,
    /// T * J * 3, frame-major, 32-bit precision.
    pub coords: Vec<f32>,
    /// Zero-based class id.
    pub label: usize,
    pub subject_id: u32,
    pub camera_id: u32,
    pub setup_id: u32,
    /// Track id within the source file.
    pub body_id: u64,
    /// Source clip identity (file stem); bodies from the same clip share it.
    pub source: String,
}

impl SkeletonSequence {
    pub fn coord(&self, t: usize, j: usize) -> [f32; 3] {
        let i = (t * self.joints + j) * 3;
        [self.coords[i], self.coords[i + 1], self.coords[i + 2]]
    }

    /// Sum of squared coordinates and squared frame-to-frame differences.
    /// Zero-filled ghost bodies (a known NTU capture artifact) score ~0.
    pub fn total_energy(&self) -> f64 {
        let mut e = 0.0f64;
        for &c in &self.coords {
            e += (c as f64) * (c as f64);
        }
        for t in 1..self.frames {
            for i in 0..self.joints * 3 {
                let d = self.coords[t * self.joints * 3 + i] as f64
                    - self.coords[(t - 1) * self.joints * 3 + i] as f64;
                e += d * d;
            }
        }
        e
    }

    pub fn is_ghost(&self) -> bool {
        self.total_energy() < 1e-6
    }
}

/// Metadata decoded from an NTU file stem `SsssCcccPpppRrrrAaaa`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NtuFileMeta {
    pub setup: u32,
    pub camera: u32,
    pub subject: u32,
    pub replication: u32,
    /// Zero-based.
    pub label: usize,
}

pub fn parse_ntu_file_name(name: &str) -> Result<NtuFileMeta> {
    let stem = name
        .rsplit('/')
        .next()
        .unwrap_or(name)
        .trim_end_matches(".skeleton");
    let bytes = stem.as_bytes();
    if bytes.len() != 20 {
        return Err(Error::Data(format!(
            "file name {stem:?} does not match SsssCcccPpppRrrrAaaa"
        )));
    }
    let field = |tag: u8, at: usize| -> Result<u32> {
        if bytes[at] != tag {
            return Err(Error::Data(format!(
                "file name {stem:?} does not match SsssCcccPpppRrrrAaaa"
            )));
        }
        stem[at + 1..at + 4]
            .parse::<u32>()
            .map_err(|_| Error::Data(format!("non-numeric field in file name {stem:?}")))
    };
    let setup = field(b'S', 0)?;
    let camera = field(b'C', 4)?;
    let subject = field(b'P', 8)?;
    let replication = field(b'R', 12)?;
    let action = field(b'A', 16)?;
    if action == 0 {
        return Err(Error::Data(format!("action id 0 in file name {stem:?}")));
    }
    Ok(NtuFileMeta {
        setup,
        camera,
        subject,
        replication,
        label: (action - 1) as usize,
    })
}

/// Parse one NTU `.skeleton` text stream into per-body sequences. Frames
/// where a body is absent are dropped from that body's sequence.
pub fn parse_ntu_skeleton(text: &str, file_name: &str) -> Result<Vec<SkeletonSequence>> {
    let meta = parse_ntu_file_name(file_name)?;
    let path = file_name.to_string();
    let mut lines = text.lines().enumerate();

    let mut next = |what: &str| -> Result<(usize, &str)> {
        for (i, l) in lines.by_ref() {
            if !l.trim().is_empty() {
                return Ok((i + 1, l.trim()));
            }
        }
        Err(Error::Parse {
            path: path.clone(),
            line: 0,
            msg: format!("truncated file: expected {what}"),
        })
    };
    let parse_usize = |line: usize, s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse {
            path: file_name.to_string(),
            line,
            msg: format!("non-numeric {what}: {s:?}"),
        })
    };

    let (ln, s) = next("frame count")?;
    let frame_count = parse_usize(ln, s, "frame count")?;

    // body id -> (frame coords)
    let mut bodies: BTreeMap<u64, Vec<[f32; 3]>> = BTreeMap::new();
    let mut body_frames: BTreeMap<u64, usize> = BTreeMap::new();

    for _ in 0..frame_count {
        let (ln, s) = next("body count")?;
        let nbodies = parse_usize(ln, s, "body count")?;
        for _ in 0..nbodies {
            let (ln, s) = next("body metadata")?;
            let id_field = s.split_whitespace().next().unwrap_or("");
            let body_id: u64 = id_field.parse().map_err(|_| Error::Parse {
                path: path.clone(),
                line: ln,
                msg: format!("non-numeric body id: {id_field:?}"),
            })?;
            let (ln, s) = next("joint count")?;
            let njoints = parse_usize(ln, s, "joint count")?;
            if njoints != NTU_JOINTS {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: ln,
                    msg: format!("joint count {njoints} != declared {NTU_JOINTS}"),
                });
            }
            let coords = bodies.entry(body_id).or_default();
            for _ in 0..njoints {
                let (ln, s) = next("joint line")?;
                let mut it = s.split_whitespace();
                let mut xyz = [0.0f32; 3];
                for v in xyz.iter_mut() {
                    let f = it.next().ok_or_else(|| Error::Parse {
                        path: path.clone(),
                        line: ln,
                        msg: "joint line has fewer than 3 fields".into(),
                    })?;
                    *v = f.parse().map_err(|_| Error::Parse {
                        path: path.clone(),
                        line: ln,
                        msg: format!("non-numeric coordinate: {f:?}"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            path: path.clone(),
                            line: ln,
                            msg: format!("non-finite coordinate: {f:?}"),
                        });
                    }
                }
                coords.push(xyz);
            }
            *body_frames.entry(body_id).or_insert(0) += 1;
        }
    }

    let stem = path
        .rsplit('/')
        .next()
        .unwrap_or(&path)
        .trim_end_matches(".skeleton")
        .to_string();
    let mut out = Vec::new();
    for (body_id, coords) in bodies {
        let frames = body_frames[&body_id];
        let flat: Vec<f32> = coords.into_iter().flatten().collect();
        out.push(SkeletonSequence {
            frames,
            joints: NTU_JOINTS,
            coords: flat,
            label: meta.label,
            subject_id: meta.subject,
            camera_id: meta.camera,
            setup_id: meta.setup,
            body_id,
            source: stem.clone(),
        });
    }
    Ok(out)
}

pub const NTU_JOINTS: usize = 25;

pub fn canonical_header() -> String {
    format!("msgn-canonical {CANONICAL_VERSION}")
}

pub fn write_canonical(seq: &SkeletonSequence, dataset: &str) -> String {
    let mut line = format!(
        "{CANONICAL_VERSION} {} {} {} {} {} {} {} {} {}",
        dataset,
        seq.label,
        seq.subject_id,
        seq.camera_id,
        seq.setup_id,
        seq.body_id,
        if seq.source.is_empty() { "-" } else { &seq.source },
        seq.frames,
        seq.joints,
    );
    for &c in &seq.coords {
        line.push(' ');
        line.push_str(&format!("{c}"));
    }
    line
}

pub fn write_canonical_file(seqs: &[SkeletonSequence], dataset: &str) -> String {
    let mut out = canonical_header();
    out.push('\n');
    for s in seqs {
        out.push_str(&write_canonical(s, dataset));
        out.push('\n');
    }
    out
}

/// Load a canonical stream. Returns the dataset name of the first record
/// (if any) alongside the sequences.
pub fn load_canonical(text: &str) -> Result<(Option<String>, Vec<SkeletonSequence>)> {
    let mut seqs = Vec::new();
    let mut dataset = None;
    let mut saw_header = false;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            let expect = canonical_header();
            if line != expect {
                if line.starts_with("msgn-canonical") {
                    return Err(Error::Data(format!(
                        "canonical schema version mismatch: got {line:?}, supported version {CANONICAL_VERSION}"
                    )));
                }
                return Err(Error::Data(format!(
                    "missing canonical header, got {line:?}"
                )));
            }
            saw_header = true;
            continue;
        }
        let record_index = seqs.len();
        let mut it = line.split_whitespace();
        let mut field = |what: &str| -> Result<String> {
            it.next().map(str::to_string).ok_or_else(|| {
                Error::Data(format!("record {record_index}: missing field {what}"))
            })
        };
        let version: u32 = field("version")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: non-numeric version"))
        })?;
        if version != CANONICAL_VERSION {
            return Err(Error::Data(format!(
                "record {record_index}: schema version {version} unsupported (expected {CANONICAL_VERSION})"
            )));
        }
        let ds = field("dataset")?;
        let label: usize = field("label")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: bad label"))
        })?;
        let subject: u32 = field("subject")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: bad subject"))
        })?;
        let camera: u32 = field("camera")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: bad camera"))
        })?;
        let setup: u32 = field("setup")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: bad setup"))
        })?;
        let body: u64 = field("body")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: bad body id"))
        })?;
        let source = field("source")?;
        let frames: usize = field("T")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: bad frame count"))
        })?;
        let joints: usize = field("J")?.parse().map_err(|_| {
            Error::Data(format!("record {record_index}: bad joint count"))
        })?;
        let mut coords = Vec::with_capacity(frames * joints * 3);
        for s in it {
            let v: f32 = s.parse().map_err(|_| {
                Error::Data(format!("record {record_index}: non-numeric coordinate"))
            })?;
            coords.push(v);
        }
        if coords.len() != frames * joints * 3 {
            return Err(Error::Data(format!(
                "record {record_index}: coordinate count {} != 3*T*J = {}",
                coords.len(),
                frames * joints * 3
            )));
        }
        let _ = dataset.get_or_insert(ds);
        let (line_no, _) = (idx, ());
        let _ = line_no;
        seqs.push(SkeletonSequence {
            frames,
            joints,
            coords,
            label,
            subject_id: subject,
            camera_id: camera,
            setup_id: setup,
            body_id: body,
            source: if source == "-" { String::new() } else { source },
        });
    }
    Ok((dataset, seqs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    CrossSubject,
    CrossView,
    CrossSetup,
    SameSubject,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-subject" => Ok(Protocol::CrossSubject),
            "cross-view" => Ok(Protocol::CrossView),
            "cross-setup" => Ok(Protocol::CrossSetup),
            "same-subject" => Ok(Protocol::SameSubject),
            _ => Err(Error::Protocol(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Training-side id lists for each protocol; ids outside train+test are a
/// protocol error. A `None` test side means "everything not in train".
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IdLists {
    pub train_subjects: Vec<u32>,
    pub test_subjects: Option<Vec<u32>>,
    pub train_cameras: Vec<u32>,
    pub test_cameras: Option<Vec<u32>>,
    pub train_setups: Vec<u32>,
    pub test_setups: Option<Vec<u32>>,
}

impl IdLists {
    /// NTU60 defaults: cross-subject training half, cameras 2 and 3,
    /// even-numbered setups.
    pub fn ntu60() -> Self {
        IdLists {
            train_subjects: vec![
                1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38,
            ],
            test_subjects: None,
            train_cameras: vec![2, 3],
            test_cameras: Some(vec![1]),
            train_setups: (1..=17).filter(|s| s % 2 == 0).collect(),
            test_setups: None,
        }
    }

    /// NTU120 defaults.
    pub fn ntu120() -> Self {
        IdLists {
            train_subjects: vec![
                1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38, 45,
                46, 47, 49, 50, 52, 53, 54, 55, 56, 57, 58, 59, 70, 74, 78, 80, 81, 82, 83, 84,
                85, 86, 89, 91, 92, 93, 94, 95, 97, 98, 100, 103,
            ],
            test_subjects: None,
            train_cameras: vec![2, 3],
            test_cameras: Some(vec![1]),
            train_setups: (1..=32).filter(|s| s % 2 == 0).collect(),
            test_setups: None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    /// Index into the canonical record list.
    pub record: usize,
    pub split: Split,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub class_count: usize,
    pub protocol: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.record)
            .collect()
    }

    /// Stable content digest; equal inputs produce equal digests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dataset.as_bytes());
        h.update(self.protocol.as_bytes());
        h.update(self.class_count.to_le_bytes());
        for e in &self.entries {
            h.update(e.record.to_le_bytes());
            h.update([match e.split {
                Split::Train => 0u8,
                Split::Val => 1,
                Split::Test => 2,
            }]);
        }
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Assign every record to train/val/test. Assignment is a pure function of
/// (record metadata, id lists, seed): the validation carve-out is a seeded
/// shuffle of the train indices.
pub fn split_protocol(
    records: &[SkeletonSequence],
    dataset: &str,
    class_count: usize,
    protocol: Protocol,
    ids: &IdLists,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let side = |train: &[u32], test: &Option<Vec<u32>>, id: u32, kind: &str| -> Result<Split> {
        if train.contains(&id) {
            Ok(Split::Train)
        } else if test.as_ref().is_none_or(|t| t.contains(&id)) {
            Ok(Split::Test)
        } else {
            Err(Error::Protocol(format!(
                "{kind} id {id} is in neither the train nor the test list"
            )))
        }
    };
    let mut entries = Vec::with_capacity(records.len());
    let mut per_class_seen: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let split = match protocol {
            Protocol::CrossSubject => side(
                &ids.train_subjects,
                &ids.test_subjects,
                r.subject_id,
                "subject",
            )?,
            Protocol::CrossView => {
                side(&ids.train_cameras, &ids.test_cameras, r.camera_id, "camera")?
            }
            Protocol::CrossSetup => {
                side(&ids.train_setups, &ids.test_setups, r.setup_id, "setup")?
            }
            Protocol::SameSubject => {
                // half the samples of each class, by order of appearance
                let seen = per_class_seen.entry(r.label).or_insert(0);
                let s = if *seen % 2 == 0 { Split::Train } else { Split::Test };
                *seen += 1;
                s
            }
        };
        entries.push(ManifestEntry { record: i, split });
    }
    if val_fraction > 0.0 {
        let mut train_idx: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        train_idx.shuffle(&mut rng);
        let n_val = (val_fraction * train_idx.len() as f64).floor() as usize;
        for &i in train_idx.iter().take(n_val) {
            entries[i].split = Split::Val;
        }
    }
    let protocol_name = match protocol {
        Protocol::CrossSubject => "cross-subject",
        Protocol::CrossView => "cross-view",
        Protocol::CrossSetup => "cross-setup",
        Protocol::SameSubject => "same-subject",
    };
    Ok(DatasetManifest {
        dataset: dataset.to_string(),
        class_count,
        protocol: protocol_name.to_string(),
        entries,
    })
}
