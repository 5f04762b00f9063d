//! Bag data model and the `bagpack` line-delimited JSON format.
//!
//! A bagpack file starts with one header record describing the dataset
//! (class count, embedding width `D`, concept vocabulary of size `C`, split)
//! followed by one record per bag. Every bag is validated against the header
//! both when written and when read; non-finite numbers are always rejected.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One segment of an image: its backbone embedding and concept-similarity
/// targets, plus optional geometry metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub embedding: Vec<f64>,
    pub clip_scores: Vec<f64>,
    #[serde(default)]
    pub concept_ids: Vec<usize>,
    #[serde(default)]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub mask_area: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bag {
    pub image_id: String,
    pub label: usize,
    #[serde(default)]
    pub group_id: Option<u32>,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Embeddings stacked row-wise into an `N_s x D` matrix.
    pub fn embedding_matrix(&self) -> ndarray::Array2<f64> {
        stack_rows(self.instances.iter().map(|i| i.embedding.as_slice()))
    }

    /// CLIP targets stacked row-wise into an `N_s x C` matrix.
    pub fn clip_matrix(&self) -> ndarray::Array2<f64> {
        stack_rows(self.instances.iter().map(|i| i.clip_scores.as_slice()))
    }
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> ndarray::Array2<f64> {
    let rows: Vec<&[f64]> = rows.collect();
    let width = rows.first().map_or(0, |r| r.len());
    let mut out = ndarray::Array2::zeros((rows.len(), width));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(src));
    }
    out
}

/// Dataset-level header shared by every bag in a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    #[serde(rename = "C")]
    pub num_concepts: usize,
    pub concept_names: Vec<String>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::schema("header", "num_classes", "must be at least 2"));
        }
        if self.embed_dim == 0 {
            return Err(Error::schema("header", "D", "must be positive"));
        }
        if self.num_concepts == 0 {
            return Err(Error::schema("header", "C", "must be positive"));
        }
        if self.concept_names.len() != self.num_concepts {
            return Err(Error::schema(
                "header",
                "concept_names",
                format!(
                    "length {} does not match C = {}",
                    self.concept_names.len(),
                    self.num_concepts
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    num_classes: usize,
    #[serde(rename = "D")]
    embed_dim: usize,
    #[serde(rename = "C")]
    num_concepts: usize,
    concept_names: Vec<String>,
    split: Split,
}

impl Header {
    fn new(m: &DatasetManifest) -> Self {
        Header {
            format_version: FORMAT_VERSION,
            num_classes: m.num_classes,
            embed_dim: m.embed_dim,
            num_concepts: m.num_concepts,
            concept_names: m.concept_names.clone(),
            split: m.split,
        }
    }

    fn into_manifest(self) -> DatasetManifest {
        DatasetManifest {
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
            num_concepts: self.num_concepts,
            concept_names: self.concept_names,
            split: self.split,
        }
    }
}

/// Checks one bag against the manifest. On failure returns `(field, message)`.
pub fn check_bag(manifest: &DatasetManifest, bag: &Bag) -> std::result::Result<(), (String, String)> {
    let fail = |field: &str, message: String| Err((field.to_string(), message));

    if bag.label >= manifest.num_classes {
        return fail(
            "label",
            format!("{} out of range [0, {})", bag.label, manifest.num_classes),
        );
    }
    if bag.instances.is_empty() {
        return fail("instances", "bag has no instances".into());
    }
    for (k, inst) in bag.instances.iter().enumerate() {
        let at = |field: &str| format!("instances[{k}].{field}");
        if inst.embedding.len() != manifest.embed_dim {
            return fail(
                &at("embedding"),
                format!(
                    "embedding length mismatch: {} != D = {}",
                    inst.embedding.len(),
                    manifest.embed_dim
                ),
            );
        }
        if inst.embedding.iter().any(|v| !v.is_finite()) {
            return fail(&at("embedding"), "non-finite value".into());
        }
        if inst.clip_scores.len() != manifest.num_concepts {
            return fail(
                &at("clip_scores"),
                format!(
                    "clip_scores length mismatch: {} != C = {}",
                    inst.clip_scores.len(),
                    manifest.num_concepts
                ),
            );
        }
        if inst.clip_scores.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail(&at("clip_scores"), "entries must be finite and >= 0".into());
        }
        if let Some(&bad) = inst
            .concept_ids
            .iter()
            .find(|&&c| c >= manifest.num_concepts)
        {
            return fail(
                &at("concept_ids"),
                format!("concept id {bad} out of range [0, {})", manifest.num_concepts),
            );
        }
        if let Some([x0, y0, x1, y1]) = inst.bbox {
            if [x0, y0, x1, y1].iter().any(|v| !v.is_finite()) {
                return fail(&at("bbox"), "non-finite coordinate".into());
            }
            if !(x0 < x1 && y0 < y1) {
                return fail(&at("bbox"), "requires x_min < x_max and y_min < y_max".into());
            }
        }
    }
    Ok(())
}

fn check_group_coverage(
    mode: &mut Option<bool>,
    bag: &Bag,
    location: impl FnOnce() -> String,
) -> Result<()> {
    let has = bag.group_id.is_some();
    match *mode {
        None => *mode = Some(has),
        Some(expected) if expected != has => {
            return Err(Error::schema(
                location(),
                "group_id",
                "mixed group coverage: either every bag or no bag carries a group id",
            ))
        }
        _ => {}
    }
    Ok(())
}

/// Validates every bag, then writes the header and one record per bag.
pub fn write_bagpack_to<W: Write>(
    manifest: &DatasetManifest,
    bags: &[Bag],
    mut out: W,
) -> Result<()> {
    manifest.validate()?;
    let mut coverage = None;
    for (i, bag) in bags.iter().enumerate() {
        check_bag(manifest, bag)
            .map_err(|(field, message)| Error::schema(format!("bag {i}"), field, message))?;
        check_group_coverage(&mut coverage, bag, || format!("bag {i}"))?;
    }

    let header = Header::new(manifest);
    let io_err = |e: std::io::Error| Error::io("<bagpack stream>", e);
    serde_json::to_writer(&mut out, &header).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(b"\n").map_err(io_err)?;
    for bag in bags {
        serde_json::to_writer(&mut out, bag).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_bagpack(manifest: &DatasetManifest, bags: &[Bag], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_bagpack_to(manifest, bags, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Streaming reader: parses the header eagerly and yields validated bags in
/// file order.
pub struct BagpackReader<R> {
    lines: std::io::Lines<R>,
    manifest: DatasetManifest,
    line_no: usize,
    bag_index: usize,
    coverage: Option<bool>,
}

impl<R: BufRead> BagpackReader<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut line_no = 0;
        let header_line = loop {
            line_no += 1;
            match lines.next() {
                None => return Err(Error::Format("missing header record".into())),
                Some(Err(e)) => return Err(Error::io("<bagpack stream>", e)),
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => break l,
            }
        };
        let manifest = parse_header(&header_line, line_no)?;
        Ok(Self {
            lines,
            manifest,
            line_no,
            bag_index: 0,
            coverage: None,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

/// Parses a header line shared by the bagpack and rawdet formats.
pub(crate) fn parse_header(line: &str, line_no: usize) -> Result<DatasetManifest> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "unsupported format_version {v} (expected {FORMAT_VERSION})"
            )))
        }
        None => return Err(Error::Format("header lacks format_version".into())),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let manifest = header.into_manifest();
    manifest.validate()?;
    Ok(manifest)
}

impl<R: BufRead> Iterator for BagpackReader<R> {
    type Item = Result<Bag>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = loop {
            self.line_no += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(Error::io("<bagpack stream>", e))),
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => break l,
            }
        };
        let line_no = self.line_no;
        let index = self.bag_index;
        self.bag_index += 1;

        let bag: Bag = match serde_json::from_str(&line) {
            Ok(b) => b,
            Err(e) => {
                return Some(Err(Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                }))
            }
        };
        let location = || format!("line {line_no} (bag {index})");
        if let Err((field, message)) = check_bag(&self.manifest, &bag) {
            return Some(Err(Error::schema(location(), field, message)));
        }
        if let Err(e) = check_group_coverage(&mut self.coverage, &bag, location) {
            return Some(Err(e));
        }
        Some(Ok(bag))
    }
}

pub fn open_bagpack(path: impl AsRef<Path>) -> Result<BagpackReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BagpackReader::new(BufReader::new(file))
}

pub fn read_bagpack(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<Bag>)> {
    let reader = open_bagpack(path)?;
    let manifest = reader.manifest().clone();
    let bags = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, bags))
}
