//! Protein records, the JSON-lines corpus format, reference-set curation,
//! masking, and batching.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Segment, Tensor};
use crate::rng::{derive_seed, rng_for, stream};

pub const ALPHABET: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const NUM_RESIDUES: usize = 20;
pub const MASK_TOKEN: u8 = 20;
pub const PAD_TOKEN: u8 = 21;
pub const VOCAB_SIZE: usize = 22;

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_MAX_LEN: usize = 64;
pub const DEFAULT_BATCH_RECORDS: usize = 16;
pub const REFERENCE_MAX_RESOLUTION: f64 = 2.0;
pub const REFERENCE_MAX_RFREE: f64 = 0.20;

pub fn residue_index(symbol: u8) -> Option<u8> {
    ALPHABET.iter().position(|&c| c == symbol).map(|i| i as u8)
}

pub fn residue_symbol(index: u8) -> char {
    match index {
        MASK_TOKEN => '#',
        PAD_TOKEN => '_',
        i => ALPHABET[i as usize] as char,
    }
}

pub fn encode_sequence(seq: &str) -> Result<Vec<u8>> {
    seq.bytes()
        .enumerate()
        .map(|(i, c)| {
            residue_index(c).ok_or_else(|| {
                Error::Data(format!("unknown residue {:?} at position {}", c as char, i))
            })
        })
        .collect()
}

pub fn decode_sequence(seq: &[u8]) -> String {
    seq.iter().map(|&r| residue_symbol(r)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SsLabel {
    Helix,
    Strand,
    Coil,
}

impl SsLabel {
    pub const ALL: [SsLabel; 3] = [SsLabel::Helix, SsLabel::Strand, SsLabel::Coil];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            'H' => Some(SsLabel::Helix),
            'E' => Some(SsLabel::Strand),
            'C' => Some(SsLabel::Coil),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            SsLabel::Helix => 'H',
            SsLabel::Strand => 'E',
            SsLabel::Coil => 'C',
        }
    }
}

/// One protein chain with everything the training objective needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProteinRecord {
    pub id: String,
    /// Residue indices into [`ALPHABET`].
    pub sequence: Vec<u8>,
    /// Cα positions in Å.
    pub coords: Vec<[f64; 3]>,
    /// Frozen per-residue structure embeddings, `L × D_g`.
    pub gnn_embedding: Option<Vec<Vec<f64>>>,
    pub structure_tokens: Option<Vec<usize>>,
    pub resolution: f64,
    pub r_free: f64,
    pub ss_labels: Option<Vec<SsLabel>>,
}

impl ProteinRecord {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn embed_dim(&self) -> Option<usize> {
        self.gnn_embedding
            .as_ref()
            .and_then(|e| e.first().map(Vec::len))
    }

    /// Checks that every per-residue field has length `L ≥ 2` and that the
    /// quality metadata is in range.
    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        let fail = |what: String| Err(Error::Data(format!("record {}: {}", self.id, what)));
        if l < 2 {
            return fail(format!("length {} < 2", l));
        }
        if let Some(&bad) = self.sequence.iter().find(|&&r| r as usize >= NUM_RESIDUES) {
            return fail(format!("residue index {} outside the alphabet", bad));
        }
        if self.coords.len() != l {
            return fail(format!(
                "{} coordinates for {} residues",
                self.coords.len(),
                l
            ));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return fail("non-finite coordinate".into());
        }
        if let Some(e) = &self.gnn_embedding {
            if e.len() != l {
                return fail(format!("{} embedding rows for {} residues", e.len(), l));
            }
            let d = e[0].len();
            if d == 0 || e.iter().any(|r| r.len() != d) {
                return fail("ragged or empty embedding rows".into());
            }
            if e.iter().flatten().any(|v| !v.is_finite()) {
                return fail("non-finite embedding value".into());
            }
        }
        if let Some(t) = &self.structure_tokens {
            if t.len() != l {
                return fail(format!("{} structure tokens for {} residues", t.len(), l));
            }
        }
        if let Some(s) = &self.ss_labels {
            if s.len() != l {
                return fail(format!(
                    "{} secondary-structure labels for {} residues",
                    s.len(),
                    l
                ));
            }
        }
        if !(self.resolution > 0.0) {
            return fail(format!("resolution {} must be > 0", self.resolution));
        }
        if !(0.0..=1.0).contains(&self.r_free) {
            return fail(format!("r_free {} outside [0, 1]", self.r_free));
        }
        Ok(())
    }

    /// Contiguous residue window `[start, start + len)` with all per-residue
    /// fields sliced identically.
    pub fn window(&self, start: usize, len: usize) -> ProteinRecord {
        let end = start + len;
        ProteinRecord {
            id: self.id.clone(),
            sequence: self.sequence[start..end].to_vec(),
            coords: self.coords[start..end].to_vec(),
            gnn_embedding: self.gnn_embedding.as_ref().map(|e| e[start..end].to_vec()),
            structure_tokens: self
                .structure_tokens
                .as_ref()
                .map(|t| t[start..end].to_vec()),
            resolution: self.resolution,
            r_free: self.r_free,
            ss_labels: self.ss_labels.as_ref().map(|s| s[start..end].to_vec()),
        }
    }
}

/// Wire format of one corpus line.
#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    seq: String,
    coords: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gnn_emb: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    resolution: f64,
    r_free: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ss: Option<String>,
}

impl RecordLine {
    fn into_record(self) -> Result<ProteinRecord> {
        let sequence = encode_sequence(&self.seq)
            .map_err(|e| Error::Data(format!("record {}: {}", self.id, e)))?;
        let ss_labels = match self.ss {
            None => None,
            Some(s) => Some(
                s.chars()
                    .map(|c| {
                        SsLabel::from_char(c).ok_or_else(|| {
                            Error::Data(format!("record {}: bad ss label {:?}", self.id, c))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let rec = ProteinRecord {
            id: self.id,
            sequence,
            coords: self.coords,
            gnn_embedding: self.gnn_emb,
            structure_tokens: self.tokens,
            resolution: self.resolution,
            r_free: self.r_free,
            ss_labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn from_record(r: &ProteinRecord) -> Self {
        RecordLine {
            id: r.id.clone(),
            seq: decode_sequence(&r.sequence),
            coords: r.coords.clone(),
            gnn_emb: r.gnn_embedding.clone(),
            tokens: r.structure_tokens.clone(),
            resolution: r.resolution,
            r_free: r.r_free,
            ss: r
                .ss_labels
                .as_ref()
                .map(|s| s.iter().map(|l| l.as_char()).collect()),
        }
    }
}

pub fn parse_record_line(line: &str) -> Result<ProteinRecord> {
    let wire: RecordLine = serde_json::from_str(line)?;
    wire.into_record()
}

pub fn record_to_line(r: &ProteinRecord) -> Result<String> {
    Ok(serde_json::to_string(&RecordLine::from_record(r))?)
}

/// Reads a JSON-lines corpus. Blank lines are skipped; any other malformed
/// line is an error carrying its 1-based line number.
pub fn load_corpus(path: &Path) -> Result<Vec<ProteinRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record_line(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, records: &[ProteinRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", record_to_line(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records with resolution strictly below `res_max` and R-free strictly
/// below `rfree_max`, in input order.
pub fn curate_reference(
    corpus: &[ProteinRecord],
    res_max: f64,
    rfree_max: f64,
) -> Vec<ProteinRecord> {
    let kept: Vec<ProteinRecord> = corpus
        .iter()
        .filter(|r| r.resolution < res_max && r.r_free < rfree_max)
        .cloned()
        .collect();
    if kept.is_empty() && !corpus.is_empty() {
        log::warn!(
            "no record passes resolution < {} and r_free < {}",
            res_max,
            rfree_max
        );
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random(u8),
    Keep,
}

/// Masked positions (0-based, ascending) and what each was replaced with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub replacements: Vec<Replacement>,
}

impl MaskPlan {
    /// A plan that masks exactly `positions` with the mask token.
    pub fn mask_only(positions: Vec<usize>) -> Self {
        let replacements = vec![Replacement::Mask; positions.len()];
        Self {
            positions,
            replacements,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn apply(&self, sequence: &[u8]) -> Vec<u8> {
        let mut out = sequence.to_vec();
        for (&p, r) in self.positions.iter().zip(&self.replacements) {
            out[p] = match *r {
                Replacement::Mask => MASK_TOKEN,
                Replacement::Random(x) => x,
                Replacement::Keep => sequence[p],
            };
        }
        out
    }
}

/// Number of masked positions for a chain of length `len`.
pub fn mask_count(len: usize, mask_rate: f64) -> usize {
    ((mask_rate * len as f64).round() as usize).clamp(1, len.max(1))
}

/// Selects `max(1, round(rate·L))` positions; each becomes the mask token
/// with probability 0.8, a uniformly random residue with 0.1, and stays
/// unchanged with 0.1.
pub fn mask_sequence(
    record: &ProteinRecord,
    mask_rate: f64,
    seed: u64,
) -> Result<(Vec<u8>, MaskPlan)> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask rate {} outside (0, 1)",
            mask_rate
        )));
    }
    let l = record.len();
    if l == 0 {
        return Err(Error::InvalidArgument(
            "cannot mask an empty sequence".into(),
        ));
    }
    let mut rng = rng_for(seed, &[stream::MASK]);
    let k = mask_count(l, mask_rate);
    let mut positions = rand::seq::index::sample(&mut rng, l, k).into_vec();
    positions.sort_unstable();
    let replacements = positions
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.8 {
                Replacement::Mask
            } else if u < 0.9 {
                Replacement::Random(rng.random_range(0..NUM_RESIDUES as u8))
            } else {
                Replacement::Keep
            }
        })
        .collect();
    let plan = MaskPlan {
        positions,
        replacements,
    };
    Ok((plan.apply(&record.sequence), plan))
}

/// Packed records plus the masking applied to each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub records: Vec<ProteinRecord>,
    pub mask_plans: Vec<MaskPlan>,
    /// Model input per record (sequence after masking).
    pub inputs: Vec<Vec<u8>>,
}

impl Batch {
    /// Unmasked batch: inputs equal the sequences.
    pub fn new(records: Vec<ProteinRecord>) -> Self {
        let inputs = records.iter().map(|r| r.sequence.clone()).collect();
        let mask_plans = records
            .iter()
            .map(|_| MaskPlan {
                positions: Vec::new(),
                replacements: Vec::new(),
            })
            .collect();
        Self {
            records,
            mask_plans,
            inputs,
        }
    }

    /// Masks every record with a per-record seed derived from `seed`.
    pub fn with_masking(records: Vec<ProteinRecord>, mask_rate: f64, seed: u64) -> Result<Self> {
        let mut inputs = Vec::with_capacity(records.len());
        let mut mask_plans = Vec::with_capacity(records.len());
        for (b, r) in records.iter().enumerate() {
            let (masked, plan) = mask_sequence(r, mask_rate, derive_seed(seed, &[b as u64]))?;
            inputs.push(masked);
            mask_plans.push(plan);
        }
        Ok(Self {
            records,
            mask_plans,
            inputs,
        })
    }

    /// Uses explicit inputs and plans (e.g. single-position masking).
    pub fn with_plans(records: Vec<ProteinRecord>, mask_plans: Vec<MaskPlan>) -> Result<Self> {
        if mask_plans.len() != records.len() {
            return Err(Error::Shape(format!(
                "{} mask plans for {} records",
                mask_plans.len(),
                records.len()
            )));
        }
        for (r, p) in records.iter().zip(&mask_plans) {
            if p.positions.iter().any(|&i| i >= r.len()) {
                return Err(Error::InvalidArgument(format!(
                    "mask position outside record {}",
                    r.id
                )));
            }
        }
        let inputs = records
            .iter()
            .zip(&mask_plans)
            .map(|(r, p)| p.apply(&r.sequence))
            .collect();
        Ok(Self {
            records,
            mask_plans,
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total residue count N = Σ L_b.
    pub fn total_residues(&self) -> usize {
        self.records.iter().map(ProteinRecord::len).sum()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.records
            .iter()
            .map(|r| {
                let o = acc;
                acc += r.len();
                o
            })
            .collect()
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.offsets()
            .into_iter()
            .zip(&self.records)
            .map(|(start, r)| Segment {
                start,
                len: r.len(),
            })
            .collect()
    }

    pub fn flat_index(&self, record: usize, residue: usize) -> usize {
        self.records[..record]
            .iter()
            .map(ProteinRecord::len)
            .sum::<usize>()
            + residue
    }

    /// `(record, residue)` for every flat index.
    pub fn index_map(&self) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .enumerate()
            .flat_map(|(b, r)| (0..r.len()).map(move |i| (b, i)))
            .collect()
    }

    /// Flat indices of masked positions and the true residue at each.
    pub fn masked_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let offsets = self.offsets();
        let mut idx = Vec::new();
        let mut targets = Vec::new();
        for (b, plan) in self.mask_plans.iter().enumerate() {
            for &p in &plan.positions {
                idx.push(offsets[b] + p);
                targets.push(self.records[b].sequence[p] as usize);
            }
        }
        (idx, targets)
    }

    pub fn flat_inputs(&self) -> Vec<u8> {
        self.inputs.iter().flatten().copied().collect()
    }

    /// Stacked frozen structure embeddings, `N × D_g`.
    pub fn gnn_matrix(&self) -> Result<Tensor> {
        let mut dim = None;
        let mut data = Vec::new();
        for r in &self.records {
            let e = r.gnn_embedding.as_ref().ok_or_else(|| {
                Error::Data(format!("record {} has no structure embedding", r.id))
            })?;
            for row in e {
                match dim {
                    None => dim = Some(row.len()),
                    Some(d) if d != row.len() => {
                        return Err(Error::Data(format!(
                            "record {} embedding width {} differs from {}",
                            r.id,
                            row.len(),
                            d
                        )))
                    }
                    _ => {}
                }
                data.extend_from_slice(row);
            }
        }
        Tensor::matrix(self.total_residues(), dim.unwrap_or(0), data)
    }

    pub fn flat_tokens(&self) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.total_residues());
        for r in &self.records {
            let t = r
                .structure_tokens
                .as_ref()
                .ok_or_else(|| Error::Data(format!("record {} has no structure tokens", r.id)))?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }
}

/// Seeded shuffle into batches of at most `max_records_per_batch`; records
/// longer than `max_len` are cut to a seeded random contiguous window.
pub fn make_batches(
    corpus: &[ProteinRecord],
    max_records_per_batch: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<ProteinRecord>>> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len {} < 2", max_len)));
    }
    if max_records_per_batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE]));
    Ok(order
        .chunks(max_records_per_batch)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    truncate(
                        &corpus[i],
                        max_len,
                        derive_seed(seed, &[stream::TRUNCATE, i as u64]),
                    )
                })
                .collect()
        })
        .collect())
}

pub fn truncate(record: &ProteinRecord, max_len: usize, seed: u64) -> ProteinRecord {
    if record.len() <= max_len {
        return record.clone();
    }
    let start = rng_for(seed, &[]).random_range(0..=record.len() - max_len);
    record.window(start, max_len)
}

/// Seeded split into (train, validation) with `ceil(fraction·n)` held out.
pub fn split_validation(
    corpus: &[ProteinRecord],
    fraction: f64,
    seed: u64,
) -> (Vec<ProteinRecord>, Vec<ProteinRecord>) {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SPLIT]));
    let n_val = ((fraction * corpus.len() as f64).ceil() as usize).min(corpus.len());
    let mut val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.iter().map(|&i| corpus[i].clone()).collect(),
        val_idx.iter().map(|&i| corpus[i].clone()).collect(),
    )
}
