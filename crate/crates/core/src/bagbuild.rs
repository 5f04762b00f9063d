//! Bag construction from precomputed detector/segmenter outputs.
//!
//! Per image: keep the top-K concepts by image-level similarity, drop
//! detections for other concepts, filter masks by area, merge overlapping
//! masks, and assemble the surviving segments into a [`Bag`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::bagio::{self, Bag, DatasetManifest, Instance};
use crate::error::{Error, Result};
use crate::mask::{mask_iou, BinaryMask, RleMask};
use crate::numeric::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    /// Concepts retained per image.
    pub k_top: usize,
    /// Masks with IoU strictly above this are merged.
    pub tau_iou: f64,
    /// Minimum mask area in pixels (inclusive).
    pub tau_minpix: usize,
    /// Maximum mask area as a fraction of the image (inclusive).
    pub rho_max: f64,
    /// Bag size cap `N_s`; the largest merged segments are kept.
    pub max_instances: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            k_top: 10,
            tau_iou: 0.5,
            tau_minpix: 100,
            rho_max: 0.5,
            max_instances: 15,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_top == 0 {
            return Err(Error::Config("k_top must be at least 1".into()));
        }
        if !(self.tau_iou > 0.0 && self.tau_iou <= 1.0) {
            return Err(Error::Config(format!("tau_iou = {} not in (0, 1]", self.tau_iou)));
        }
        if self.tau_minpix == 0 {
            return Err(Error::Config("tau_minpix must be at least 1".into()));
        }
        if !(self.rho_max > 0.0 && self.rho_max <= 1.0) {
            return Err(Error::Config(format!("rho_max = {} not in (0, 1]", self.rho_max)));
        }
        if self.max_instances == 0 {
            return Err(Error::Config("max_instances must be at least 1".into()));
        }
        Ok(())
    }
}

/// One detector box with its segmentation mask, before merging.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub concept_id: usize,
    pub bbox: [f64; 4],
    pub mask: BinaryMask,
    pub score: f64,
    /// Per-segment embedding, when the producer supplies one.
    pub embedding: Option<Vec<f64>>,
    /// Per-segment CLIP targets, when the producer supplies them.
    pub clip_scores: Option<Vec<f64>>,
}

/// A connected component of overlapping detections.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDetection {
    pub mask: BinaryMask,
    pub bbox: [f64; 4],
    pub concept_ids: Vec<usize>,
    pub clip_scores: Option<Vec<f64>>,
    pub embedding: Option<Vec<f64>>,
    /// Indices into the input detection list, ascending.
    pub members: Vec<usize>,
    /// Member whose own mask was largest (ties: smallest index); its
    /// embedding stands for the component.
    pub representative: usize,
    representative_area: usize,
}

impl MergedDetection {
    pub fn area(&self) -> usize {
        self.mask.area()
    }

    fn from_detection(index: usize, det: &RawDetection) -> Self {
        Self {
            mask: det.mask.clone(),
            bbox: det.bbox,
            concept_ids: vec![det.concept_id],
            clip_scores: det.clip_scores.clone(),
            embedding: det.embedding.clone(),
            members: vec![index],
            representative: index,
            representative_area: det.mask.area(),
        }
    }

    fn absorb(&mut self, other: MergedDetection) -> Result<()> {
        self.mask.union_with(&other.mask)?;
        for k in 0..2 {
            self.bbox[k] = self.bbox[k].min(other.bbox[k]);
            self.bbox[k + 2] = self.bbox[k + 2].max(other.bbox[k + 2]);
        }
        self.concept_ids.extend(other.concept_ids);
        self.concept_ids.sort_unstable();
        self.concept_ids.dedup();
        self.clip_scores = match (self.clip_scores.take(), other.clip_scores) {
            (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()),
            (a, b) => a.or(b),
        };
        let other_wins = other.representative_area > self.representative_area
            || (other.representative_area == self.representative_area
                && other.representative < self.representative);
        if other_wins {
            self.representative = other.representative;
            self.representative_area = other.representative_area;
            self.embedding = other.embedding;
        }
        self.members.extend(other.members);
        self.members.sort_unstable();
        Ok(())
    }
}

/// Softmax-normalizes the similarities and returns the `k_top` most probable
/// concept ids, descending, ties by ascending id.
pub fn select_top_concepts(image_similarities: &[f64], k_top: usize) -> Result<Vec<usize>> {
    if k_top == 0 || k_top > image_similarities.len() {
        return Err(Error::Config(format!(
            "k_top = {k_top} outside [1, {}]",
            image_similarities.len()
        )));
    }
    if image_similarities.iter().any(|s| !s.is_finite()) {
        return Err(Error::schema("image_similarities", "", "non-finite similarity"));
    }
    let probs = softmax(image_similarities);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k_top);
    Ok(order)
}

/// Keeps detections whose mask area lies in `[tau_minpix, rho_max * H * W]`.
pub fn filter_masks(
    dets: Vec<RawDetection>,
    image_size: (usize, usize),
    cfg: &BuildConfig,
) -> Vec<RawDetection> {
    let limit = cfg.rho_max * (image_size.0 * image_size.1) as f64;
    dets.into_iter()
        .filter(|d| {
            let area = d.mask.area();
            area >= cfg.tau_minpix && area as f64 <= limit
        })
        .collect()
}

/// Merges detections whose masks overlap with IoU above `tau_iou`.
///
/// Each pass unions the connected components of the overlap graph; passes
/// repeat until no two merged masks overlap above the threshold, so the
/// result is a fixed point. Output is ordered by descending merged area,
/// ties by smallest original index.
pub fn merge_overlapping(dets: &[RawDetection], tau_iou: f64) -> Result<Vec<MergedDetection>> {
    let mut blocks: Vec<MergedDetection> = dets
        .iter()
        .enumerate()
        .map(|(i, d)| MergedDetection::from_detection(i, d))
        .collect();

    loop {
        let n = blocks.len();
        let mut uf = UnionFind::<usize>::new(n);
        let mut any_edge = false;
        for i in 0..n {
            for j in i + 1..n {
                if mask_iou(&blocks[i].mask, &blocks[j].mask)? > tau_iou {
                    uf.union(i, j);
                    any_edge = true;
                }
            }
        }
        if !any_edge {
            break;
        }
        let roots = uf.into_labeling();
        let mut slots: Vec<Option<MergedDetection>> = (0..n).map(|_| None).collect();
        for (i, block) in blocks.into_iter().enumerate() {
            match &mut slots[roots[i]] {
                Some(acc) => acc.absorb(block)?,
                slot @ None => *slot = Some(block),
            }
        }
        blocks = slots.into_iter().flatten().collect();
    }

    blocks.sort_by(|a, b| b.area().cmp(&a.area()).then(a.members[0].cmp(&b.members[0])));
    Ok(blocks)
}

/// Image-level context needed to assemble a bag and its fallback instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageContext {
    pub image_id: String,
    pub label: usize,
    pub group_id: Option<u32>,
    pub height: usize,
    pub width: usize,
    pub image_similarities: Vec<f64>,
    pub image_embedding: Vec<f64>,
}

/// Builds one bag from merged segments. Keeps the `max_instances` largest
/// segments; an empty segment list yields a single whole-image instance.
pub fn assemble_bag(
    ctx: &ImageContext,
    merged: &[MergedDetection],
    per_instance_clip: &[Vec<f64>],
    per_instance_embedding: &[Vec<f64>],
    cfg: &BuildConfig,
) -> Result<Bag> {
    if merged.len() != per_instance_clip.len() || merged.len() != per_instance_embedding.len() {
        return Err(Error::Shape(format!(
            "{} merged segments but {} clip vectors and {} embeddings",
            merged.len(),
            per_instance_clip.len(),
            per_instance_embedding.len()
        )));
    }

    let mut order: Vec<usize> = (0..merged.len()).collect();
    order.sort_by(|&a, &b| merged[b].area().cmp(&merged[a].area()).then(a.cmp(&b)));
    order.truncate(cfg.max_instances);

    let mut instances: Vec<Instance> = order
        .into_iter()
        .map(|i| Instance {
            embedding: per_instance_embedding[i].clone(),
            clip_scores: per_instance_clip[i].clone(),
            concept_ids: merged[i].concept_ids.clone(),
            bbox: Some(merged[i].bbox),
            mask_area: Some(merged[i].area() as u64),
        })
        .collect();

    if instances.is_empty() {
        instances.push(Instance {
            embedding: ctx.image_embedding.clone(),
            clip_scores: ctx.image_similarities.clone(),
            concept_ids: Vec::new(),
            bbox: Some([0.0, 0.0, ctx.width as f64, ctx.height as f64]),
            mask_area: Some((ctx.height * ctx.width) as u64),
        });
    }

    Ok(Bag {
        image_id: ctx.image_id.clone(),
        label: ctx.label,
        group_id: ctx.group_id,
        instances,
    })
}

// ---------------------------------------------------------------------------
// rawdet format

/// One detection inside a rawdet image record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDetectionRecord {
    pub concept_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
    pub mask: RleMask,
    pub embedding: Vec<f64>,
    pub clip_scores: Vec<f64>,
}

/// One image of a rawdet file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawImageRecord {
    pub image_id: String,
    pub label: usize,
    #[serde(default)]
    pub group_id: Option<u32>,
    pub height: usize,
    pub width: usize,
    pub image_similarities: Vec<f64>,
    pub image_embedding: Vec<f64>,
    pub detections: Vec<RawDetectionRecord>,
}

/// Per-image counters reported by the bag builder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub image_id: String,
    pub detections: usize,
    pub after_concept_selection: usize,
    pub after_area_filter: usize,
    pub merged: usize,
    pub instances: usize,
    pub fallback: bool,
}

impl RawImageRecord {
    fn decode_detections(&self, manifest: &DatasetManifest) -> Result<Vec<RawDetection>> {
        let loc = |k: usize| format!("image {} detection {k}", self.image_id);
        self.detections
            .iter()
            .enumerate()
            .map(|(k, d)| {
                if d.concept_id >= manifest.num_concepts {
                    return Err(Error::schema(loc(k), "concept_id", "out of range"));
                }
                if d.mask.size != [self.height, self.width] {
                    return Err(Error::schema(loc(k), "mask", "size differs from image size"));
                }
                if d.embedding.len() != manifest.embed_dim {
                    return Err(Error::schema(loc(k), "embedding", "length differs from D"));
                }
                if d.clip_scores.len() != manifest.num_concepts {
                    return Err(Error::schema(loc(k), "clip_scores", "length differs from C"));
                }
                let mask = d.mask.decode().map_err(|e| Error::schema(loc(k), "mask", e.to_string()))?;
                if mask.area() == 0 {
                    return Err(Error::schema(loc(k), "mask", "empty mask"));
                }
                Ok(RawDetection {
                    concept_id: d.concept_id,
                    bbox: d.bbox,
                    mask,
                    score: d.score,
                    embedding: Some(d.embedding.clone()),
                    clip_scores: Some(d.clip_scores.clone()),
                })
            })
            .collect()
    }
}

/// Runs the full per-image pipeline on one rawdet record.
pub fn build_image(
    record: &RawImageRecord,
    manifest: &DatasetManifest,
    cfg: &BuildConfig,
) -> Result<(Bag, BuildStats)> {
    let loc = format!("image {}", record.image_id);
    if record.image_similarities.len() != manifest.num_concepts {
        return Err(Error::schema(&loc, "image_similarities", "length differs from C"));
    }
    if record.image_embedding.len() != manifest.embed_dim {
        return Err(Error::schema(&loc, "image_embedding", "length differs from D"));
    }
    if record.height == 0 || record.width == 0 {
        return Err(Error::schema(&loc, "height/width", "image must be non-empty"));
    }

    let dets = record.decode_detections(manifest)?;
    let total = dets.len();
    let top = select_top_concepts(&record.image_similarities, cfg.k_top)?;
    let dets: Vec<RawDetection> = dets.into_iter().filter(|d| top.contains(&d.concept_id)).collect();
    let after_concepts = dets.len();
    let dets = filter_masks(dets, (record.height, record.width), cfg);
    let after_filter = dets.len();
    let merged = merge_overlapping(&dets, cfg.tau_iou)?;

    let clips: Vec<Vec<f64>> = merged
        .iter()
        .map(|m| m.clip_scores.clone().unwrap_or_default())
        .collect();
    let embeddings: Vec<Vec<f64>> = merged
        .iter()
        .map(|m| m.embedding.clone().unwrap_or_default())
        .collect();
    let ctx = ImageContext {
        image_id: record.image_id.clone(),
        label: record.label,
        group_id: record.group_id,
        height: record.height,
        width: record.width,
        image_similarities: record.image_similarities.clone(),
        image_embedding: record.image_embedding.clone(),
    };
    let bag = assemble_bag(&ctx, &merged, &clips, &embeddings, cfg)?;
    let stats = BuildStats {
        image_id: record.image_id.clone(),
        detections: total,
        after_concept_selection: after_concepts,
        after_area_filter: after_filter,
        merged: merged.len(),
        instances: bag.len(),
        fallback: merged.is_empty(),
    };
    Ok((bag, stats))
}

pub fn write_rawdet(
    manifest: &DatasetManifest,
    records: &[RawImageRecord],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut out = BufWriter::new(file);
    // same header layout as bagpack
    let mut header = Vec::new();
    bagio::write_bagpack_to(manifest, &[], &mut header)?;
    out.write_all(&header).map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_rawdet(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<RawImageRecord>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::Format("missing rawdet header".into())),
            Some((_, Err(e))) => return Err(Error::io(path, e)),
            Some((_, Ok(l))) if l.trim().is_empty() => continue,
            Some((i, Ok(l))) => break bagio::parse_header(&l, i + 1)?,
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawImageRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok((header, records))
}

/// Reads a rawdet file, builds every bag and writes the bagpack.
pub fn build_bagpack(
    rawdet: impl AsRef<Path>,
    out: impl AsRef<Path>,
    cfg: &BuildConfig,
) -> Result<Vec<BuildStats>> {
    cfg.validate()?;
    let (manifest, records) = read_rawdet(rawdet)?;
    if cfg.k_top > manifest.num_concepts {
        return Err(Error::Config(format!(
            "k_top = {} exceeds C = {}",
            cfg.k_top, manifest.num_concepts
        )));
    }
    let mut bags = Vec::with_capacity(records.len());
    let mut stats = Vec::with_capacity(records.len());
    for rec in &records {
        let (bag, s) = build_image(rec, &manifest, cfg)?;
        bags.push(bag);
        stats.push(s);
    }
    bagio::write_bagpack(&manifest, &bags, out)?;
    Ok(stats)
}
