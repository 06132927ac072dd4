//! File formats: the MCW1 tensor container for frozen/trainable weights,
//! MCM1 plain-text soft masks, binary PPM/PGM images, 16-bit PGM panoptic
//! maps with a JSON sidecar, the JSON-lines embedding table, and the
//! dataset directory layout.
//!
//! All writers go through a write-temp-then-rename step so partial files
//! never appear under the final name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_tokens::{MaskSet, DEFAULT_THRESHOLD};
use crate::pipeline::{EmbeddingTable, PanopticMap, PanopticSegment, TableEntry};
use crate::rma::{RMAParams, RmaLayerParams};
use crate::tensor::Tensor;
use crate::training::TrainSample;
use crate::vit::{FrozenWeights, LayerWeights, ViTConfig};

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---- MCW1 tensor container -------------------------------------------------

/// Named f32 tensors plus the encoder geometry, as stored on disk.
#[derive(Debug, Clone)]
pub struct Mcw1File {
    pub config: ViTConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Mcw1File {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(b"MCW1\n");
        out.extend_from_slice(
            format!(
                "{} {} {} {} {} {} {}\n",
                c.image_size, c.patch_size, c.depth, c.dim, c.heads, c.mlp_ratio, c.out_dim
            )
            .as_bytes(),
        );
        out.extend_from_slice(format!("{}\n", self.tensors.len()).as_bytes());
        for (name, shape, data) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            out.extend_from_slice(
                format!("{} {} {}\n", name, shape.len(), dims.join(" ")).as_bytes(),
            );
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = 0usize;
        let line = |cur: &mut usize| -> Result<String> {
            let start = *cur;
            while *cur < bytes.len() && bytes[*cur] != b'\n' {
                *cur += 1;
            }
            if *cur >= bytes.len() {
                return Err(Error::Parse("MCW1: unexpected end of file".into()));
            }
            let s = std::str::from_utf8(&bytes[start..*cur])
                .map_err(|_| Error::Parse("MCW1: non-utf8 header".into()))?
                .to_string();
            *cur += 1;
            Ok(s)
        };
        if line(&mut cur)? != "MCW1" {
            return Err(Error::Parse("MCW1: bad magic".into()));
        }
        let cfg_line = line(&mut cur)?;
        let nums: Vec<usize> = cfg_line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("MCW1: bad config field {t}"))))
            .collect::<Result<_>>()?;
        if nums.len() != 7 {
            return Err(Error::Parse("MCW1: config wants 7 fields".into()));
        }
        let config = ViTConfig {
            image_size: nums[0],
            patch_size: nums[1],
            depth: nums[2],
            dim: nums[3],
            heads: nums[4],
            mlp_ratio: nums[5],
            out_dim: nums[6],
        };
        let count: usize = line(&mut cur)?
            .parse()
            .map_err(|_| Error::Parse("MCW1: bad tensor count".into()))?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let header = line(&mut cur)?;
            let mut toks = header.split_whitespace();
            let name = toks
                .next()
                .ok_or_else(|| Error::Parse("MCW1: missing tensor name".into()))?
                .to_string();
            let rank: usize = toks
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Parse(format!("MCW1: bad rank for {name}")))?;
            let shape: Vec<usize> = toks
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("MCW1: bad extent for {name}"))))
                .collect::<Result<_>>()?;
            if shape.len() != rank {
                return Err(Error::Parse(format!("MCW1: rank mismatch for {name}")));
            }
            let n: usize = shape.iter().product();
            if cur + 4 * n > bytes.len() {
                return Err(Error::Parse(format!("MCW1: truncated data for {name}")));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let off = cur + 4 * i;
                data.push(f32::from_le_bytes([
                    bytes[off],
                    bytes[off + 1],
                    bytes[off + 2],
                    bytes[off + 3],
                ]));
            }
            cur += 4 * n;
            tensors.push((name, shape, data));
        }
        if cur != bytes.len() {
            return Err(Error::Parse("MCW1: trailing bytes".into()));
        }
        Ok(Mcw1File { config, tensors })
    }
}

fn f32_vec(data: &[f64]) -> Vec<f32> {
    data.iter().map(|&v| v as f32).collect()
}

fn f64_tensor(shape: &[usize], data: &[f32]) -> Result<Tensor> {
    Tensor::from_vec(shape, data.iter().map(|&v| v as f64).collect())
}

/// Serialize the frozen backbone into an MCW1 file.
pub fn save_frozen_weights(path: &Path, w: &FrozenWeights) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    fn push(
        tensors: &mut Vec<(String, Vec<usize>, Vec<f32>)>,
        name: String,
        shape: &[usize],
        data: &[f64],
    ) {
        tensors.push((name, shape.to_vec(), f32_vec(data)));
    }
    push(&mut tensors, "patch_kernel".into(), w.patch_kernel.shape(), w.patch_kernel.data());
    push(&mut tensors, "patch_bias".into(), &[w.patch_bias.len()], &w.patch_bias);
    push(&mut tensors, "pos_embed".into(), w.pos_embed.shape(), w.pos_embed.data());
    push(&mut tensors, "class_embed".into(), &[w.class_embed.len()], &w.class_embed);
    for (i, lw) in w.layers.iter().enumerate() {
        let mut p = |n: &str, shape: &[usize], data: &[f64]| {
            tensors.push((format!("layer{i}.{n}"), shape.to_vec(), f32_vec(data)));
        };
        p("ln1_gamma", &[lw.ln1_gamma.len()], &lw.ln1_gamma);
        p("ln1_beta", &[lw.ln1_beta.len()], &lw.ln1_beta);
        p("wq", lw.wq.shape(), lw.wq.data());
        p("bq", &[lw.bq.len()], &lw.bq);
        p("wk", lw.wk.shape(), lw.wk.data());
        p("bk", &[lw.bk.len()], &lw.bk);
        p("wv", lw.wv.shape(), lw.wv.data());
        p("bv", &[lw.bv.len()], &lw.bv);
        p("wo", lw.wo.shape(), lw.wo.data());
        p("bo", &[lw.bo.len()], &lw.bo);
        p("ln2_gamma", &[lw.ln2_gamma.len()], &lw.ln2_gamma);
        p("ln2_beta", &[lw.ln2_beta.len()], &lw.ln2_beta);
        p("w1", lw.w1.shape(), lw.w1.data());
        p("b1", &[lw.b1.len()], &lw.b1);
        p("w2", lw.w2.shape(), lw.w2.data());
        p("b2", &[lw.b2.len()], &lw.b2);
    }
    push(&mut tensors, "final_ln_gamma".into(), &[w.final_ln_gamma.len()], &w.final_ln_gamma);
    push(&mut tensors, "final_ln_beta".into(), &[w.final_ln_beta.len()], &w.final_ln_beta);
    push(&mut tensors, "proj".into(), w.proj.shape(), w.proj.data());
    let file = Mcw1File {
        config: w.config,
        tensors,
    };
    write_atomic(path, &file.to_bytes())
}

pub fn load_frozen_weights(path: &Path) -> Result<FrozenWeights> {
    let file = Mcw1File::from_bytes(&fs::read(path)?)?;
    let map: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = file
        .tensors
        .iter()
        .map(|(n, s, d)| (n.as_str(), (s, d)))
        .collect();
    let get = |name: &str| -> Result<Tensor> {
        let (s, d) = map
            .get(name)
            .ok_or_else(|| Error::Parse(format!("MCW1: missing tensor {name}")))?;
        f64_tensor(s, d)
    };
    let get_vec = |name: &str| -> Result<Vec<f64>> { Ok(get(name)?.data().to_vec()) };
    let mut layers = Vec::with_capacity(file.config.depth);
    for i in 0..file.config.depth {
        let g = |n: &str| get(&format!("layer{i}.{n}"));
        let gv = |n: &str| get_vec(&format!("layer{i}.{n}"));
        layers.push(LayerWeights {
            ln1_gamma: gv("ln1_gamma")?,
            ln1_beta: gv("ln1_beta")?,
            wq: g("wq")?,
            bq: gv("bq")?,
            wk: g("wk")?,
            bk: gv("bk")?,
            wv: g("wv")?,
            bv: gv("bv")?,
            wo: g("wo")?,
            bo: gv("bo")?,
            ln2_gamma: gv("ln2_gamma")?,
            ln2_beta: gv("ln2_beta")?,
            w1: g("w1")?,
            b1: gv("b1")?,
            w2: g("w2")?,
            b2: gv("b2")?,
        });
    }
    FrozenWeights::new(
        file.config,
        get("patch_kernel")?,
        get_vec("patch_bias")?,
        get("pos_embed")?,
        get_vec("class_embed")?,
        layers,
        get_vec("final_ln_gamma")?,
        get_vec("final_ln_beta")?,
        get("proj")?,
    )
}

/// Serialize RMA parameters in the same container, names prefixed
/// "rma.layer<k>.".
pub fn save_rma_params(path: &Path, config: ViTConfig, params: &RMAParams) -> Result<()> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec(), f32_vec(t.data())))
        .collect();
    let file = Mcw1File { config, tensors };
    write_atomic(path, &file.to_bytes())
}

pub fn load_rma_params(path: &Path) -> Result<(ViTConfig, RMAParams)> {
    let file = Mcw1File::from_bytes(&fs::read(path)?)?;
    let mut by_layer: BTreeMap<usize, BTreeMap<String, Tensor>> = BTreeMap::new();
    for (name, shape, data) in &file.tensors {
        let rest = name
            .strip_prefix("rma.layer")
            .ok_or_else(|| Error::Parse(format!("MCW1: unexpected tensor {name}")))?;
        let (layer, field) = rest
            .split_once('.')
            .ok_or_else(|| Error::Parse(format!("MCW1: unexpected tensor {name}")))?;
        let layer: usize = layer
            .parse()
            .map_err(|_| Error::Parse(format!("MCW1: bad layer in {name}")))?;
        by_layer
            .entry(layer)
            .or_default()
            .insert(field.to_string(), f64_tensor(shape, data)?);
    }
    let mut layers = BTreeMap::new();
    for (layer, mut fields) in by_layer {
        let mut take = |n: &str| -> Result<Tensor> {
            fields
                .remove(n)
                .ok_or_else(|| Error::Parse(format!("MCW1: rma.layer{layer}.{n} missing")))
        };
        layers.insert(
            layer,
            RmaLayerParams {
                f2_kernel: take("f2_kernel")?,
                f2_bias: take("f2_bias")?,
                wqm: take("wqm")?,
                bqm: take("bqm")?,
                wkm: take("wkm")?,
                bkm: take("bkm")?,
                fr1_kernel: take("fr1_kernel")?,
                fr1_bias: take("fr1_bias")?,
                fr2_kernel: take("fr2_kernel")?,
                fr2_bias: take("fr2_bias")?,
            },
        );
    }
    if layers.is_empty() {
        return Err(Error::Parse("MCW1: no rma layers in file".into()));
    }
    Ok((file.config, RMAParams { layers }))
}

// ---- MCM1 soft masks -------------------------------------------------------

pub fn save_mask_set(path: &Path, masks: &MaskSet) -> Result<()> {
    let mut s = format!(
        "MCM1 {} {} {} {}\n",
        masks.len(),
        masks.height(),
        masks.width(),
        masks.threshold()
    );
    for i in 0..masks.len() {
        let vals: Vec<String> = masks.pixels(i).iter().map(|v| format!("{v}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_mask_set(path: &Path) -> Result<MaskSet> {
    if path.is_dir() {
        return load_mask_dir(path);
    }
    let text = fs::read_to_string(path)?;
    let mut toks = text.split_whitespace();
    if toks.next() != Some("MCM1") {
        return Err(Error::Parse("MCM1: bad magic".into()));
    }
    let mut num = |what: &str| -> Result<f64> {
        toks.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Parse(format!("MCM1: bad {what}")))
    };
    let m = num("mask count")? as usize;
    let h = num("height")? as usize;
    let w = num("width")? as usize;
    let threshold = num("threshold")?;
    let n = m * h * w;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(num("pixel")?);
    }
    if toks.next().is_some() {
        return Err(Error::Parse("MCM1: trailing tokens".into()));
    }
    MaskSet::new(Tensor::from_vec(&[m, h, w], data)?, threshold)
}

/// Directory of 8-bit PGM files, value/255 as a soft mask, sorted by
/// file name.
fn load_mask_dir(dir: &Path) -> Result<MaskSet> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Parse(format!("no .pgm files in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for f in &files {
        let (gray, h, w) = load_pgm8(f)?;
        if let Some(d) = dims {
            if d != (h, w) {
                return Err(Error::Shape("mask PGMs disagree on size".into()));
            }
        } else {
            dims = Some((h, w));
        }
        data.extend(gray.iter().map(|&v| v as f64 / 255.0));
    }
    let (h, w) = dims.unwrap();
    MaskSet::new(
        Tensor::from_vec(&[files.len(), h, w], data)?,
        DEFAULT_THRESHOLD,
    )
}

// ---- PPM / PGM images ------------------------------------------------------

fn pnm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize, usize)> {
    // returns (width, height, maxval, data offset); comments unsupported
    let mut fields: Vec<String> = Vec::new();
    let mut offset = 0usize;
    let mut tok = String::new();
    for (i, &b) in bytes.iter().enumerate() {
        if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                fields.push(tok.clone());
                tok.clear();
            }
            if fields.len() == 4 {
                offset = i + 1;
                break;
            }
        } else {
            tok.push(b as char);
        }
        if i > 64 {
            break;
        }
    }
    if fields.len() != 4 || offset == 0 || fields[0] != magic {
        return Err(Error::Parse(format!("bad {magic} header")));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Parse("bad width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Parse("bad height".into()))?;
    let maxval: usize = fields[3].parse().map_err(|_| Error::Parse("bad maxval".into()))?;
    Ok((w, h, maxval, offset))
}

/// Write a [3,H,W] tensor in [0,1] as binary PPM.
pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [c, h, w] if *c == 3 => (*c, *h, *w),
        s => return Err(Error::Shape(format!("PPM wants [3,H,W], got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = (image.at3(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    write_atomic(path, &out)
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, off) = pnm_header(&bytes, "P6")?;
    if maxval != 255 {
        return Err(Error::Parse("PPM: only maxval 255 supported".into()));
    }
    if bytes.len() < off + 3 * h * w {
        return Err(Error::Parse("PPM: truncated pixel data".into()));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = bytes[off + (y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Write a [H,W] tensor in [0,1] as 8-bit binary PGM.
pub fn save_pgm8(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("PGM wants [H,W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write_atomic(path, &out)
}

pub fn load_pgm8(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path)?;
    let (w, h, maxval, off) = pnm_header(&bytes, "P5")?;
    if maxval != 255 {
        return Err(Error::Parse("PGM: expected 8-bit".into()));
    }
    if bytes.len() < off + h * w {
        return Err(Error::Parse("PGM: truncated pixel data".into()));
    }
    Ok((bytes[off..off + h * w].to_vec(), h, w))
}

// ---- panoptic map ------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SidecarSegment {
    id: u32,
    category: usize,
    is_thing: bool,
    confidence: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    segments: Vec<SidecarSegment>,
}

/// Segment ids as 16-bit binary PGM (big-endian samples) plus a JSON
/// sidecar carrying per-id category, thing flag, and confidence.
pub fn save_panoptic(pgm_path: &Path, json_path: &Path, map: &PanopticMap) -> Result<()> {
    map.validate()?;
    if map.segments.len() > u16::MAX as usize {
        return Err(Error::Invalid("too many segments for 16-bit ids".into()));
    }
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for &id in &map.ids {
        out.extend_from_slice(&(id as u16).to_be_bytes());
    }
    write_atomic(pgm_path, &out)?;
    let sidecar = Sidecar {
        segments: map
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| SidecarSegment {
                id: (i + 1) as u32,
                category: s.category,
                is_thing: s.is_thing,
                confidence: s.confidence,
            })
            .collect(),
    };
    write_atomic(json_path, &serde_json::to_vec_pretty(&sidecar)?)
}

pub fn load_panoptic(pgm_path: &Path, json_path: &Path) -> Result<PanopticMap> {
    let bytes = fs::read(pgm_path)?;
    let (w, h, maxval, off) = pnm_header(&bytes, "P5")?;
    if maxval != 65535 {
        return Err(Error::Parse("panoptic PGM must be 16-bit".into()));
    }
    if bytes.len() < off + 2 * h * w {
        return Err(Error::Parse("panoptic PGM truncated".into()));
    }
    let ids: Vec<u32> = (0..h * w)
        .map(|i| u16::from_be_bytes([bytes[off + 2 * i], bytes[off + 2 * i + 1]]) as u32)
        .collect();
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(json_path)?)?;
    let mut segments = vec![
        PanopticSegment {
            category: 0,
            is_thing: false,
            confidence: 0.0,
        };
        sidecar.segments.len()
    ];
    for s in &sidecar.segments {
        if s.id == 0 || s.id as usize > segments.len() {
            return Err(Error::Parse(format!("sidecar id {} out of range", s.id)));
        }
        segments[(s.id - 1) as usize] = PanopticSegment {
            category: s.category,
            is_thing: s.is_thing,
            confidence: s.confidence,
        };
    }
    let map = PanopticMap {
        ids,
        height: h,
        width: w,
        segments,
    };
    map.validate()?;
    Ok(map)
}

// ---- embedding table -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TableRecord {
    name: String,
    is_thing: bool,
    vector: Vec<f64>,
}

/// JSON-lines table: one record per category. The loader L2-normalizes and
/// rejects duplicate names.
pub fn save_table(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut out = String::new();
    for e in table.entries() {
        let rec = TableRecord {
            name: e.name.clone(),
            is_thing: e.is_thing,
            vector: e.vector.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TableRecord = serde_json::from_str(line)?;
        entries.push(TableEntry {
            name: rec.name,
            is_thing: rec.is_thing,
            vector: rec.vector,
        });
    }
    EmbeddingTable::normalized(entries)
}

// ---- dataset layout ----------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct GtInfo {
    /// category index per gt mask, aligned with gt_masks.mcm order
    pub categories: Vec<usize>,
}

/// Load one sample directory: image.ppm, masks.mcm (coarse proposals),
/// gt_masks.mcm, gt.json.
pub fn load_sample(dir: &Path) -> Result<TrainSample> {
    let image = load_ppm(&dir.join("image.ppm"))?;
    let proposals = load_mask_set(&dir.join("masks.mcm"))?;
    let gt_masks = load_mask_set(&dir.join("gt_masks.mcm"))?;
    let gt: GtInfo = serde_json::from_slice(&fs::read(dir.join("gt.json"))?)?;
    if gt.categories.len() != gt_masks.len() {
        return Err(Error::Invalid(format!(
            "{}: {} categories for {} gt masks",
            dir.display(),
            gt.categories.len(),
            gt_masks.len()
        )));
    }
    Ok(TrainSample {
        image,
        proposals,
        gt_masks,
        gt_categories: gt.categories,
    })
}

/// Load a dataset directory: sample subdirectories named sample<k> plus a
/// shared table.jsonl.
pub fn load_dataset(dir: &Path) -> Result<(Vec<TrainSample>, EmbeddingTable)> {
    let table = load_table(&dir.join("table.jsonl"))?;
    let mut sample_dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample"))
        })
        .collect();
    sample_dirs.sort();
    let samples = sample_dirs
        .iter()
        .map(|d| load_sample(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, table))
}
