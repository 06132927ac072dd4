//! Synthetic scene generation: colored rectangles and ellipses ("things")
//! on a textured backdrop ("stuff"), with disjoint full-coverage ground
//! truth, morphologically perturbed coarse proposals, and a prototype
//! embedding table built from encoded ground-truth masks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::mask_tokens::{MaskSet, DEFAULT_THRESHOLD};
use crate::pipeline::{EmbeddingTable, PanopticMap, PanopticSegment, TableEntry};
use crate::rma;
use crate::tensor::Tensor;
use crate::vit::{FrozenWeights, ViTConfig};

/// Fixed category palette: (name, is_thing). Index 0 is the backdrop.
pub const CATEGORIES: [(&str, bool); 4] = [
    ("backdrop", false),
    ("crimson-box", true),
    ("emerald-box", true),
    ("azure-disc", true),
];

const COLORS: [[f64; 3]; 4] = [
    [0.30, 0.32, 0.36],
    [0.85, 0.12, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.30, 0.90],
];

/// One generated sample: image, disjoint full-coverage GT masks with their
/// categories, and soft coarse proposals aligned 1:1 with the GT masks.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub gt_masks: MaskSet,
    pub proposals: MaskSet,
    pub categories: Vec<usize>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Binary erosion (or dilation) with a 4-connected structuring element,
/// iterated `radius` times.
pub fn morph(mask: &[bool], h: usize, w: usize, radius: usize, dilate: bool) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..radius {
        let mut next = cur.clone();
        for y in 0..h {
            for x in 0..w {
                let mut hit = false;
                let mut check = |yy: i64, xx: i64| {
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        hit |= cur[yy as usize * w + xx as usize] == dilate;
                    } else if !dilate {
                        // outside the frame counts as background for erosion
                        hit = true;
                    }
                };
                check(y as i64 - 1, x as i64);
                check(y as i64 + 1, x as i64);
                check(y as i64, x as i64 - 1);
                check(y as i64, x as i64 + 1);
                if hit {
                    next[y * w + x] = dilate;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Snap every channel value onto the 8-bit grid so the in-memory image is
/// identical to what a PPM round trip yields.
pub fn quantize_image(image: &mut Tensor) {
    for v in image.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
}

struct Placement {
    category: usize,
    // bounding box in pixels, patch-aligned
    y0: usize,
    x0: usize,
    side: usize,
}

fn boxes_overlap(a: &Placement, b: &Placement) -> bool {
    a.y0 < b.y0 + b.side && b.y0 < a.y0 + a.side && a.x0 < b.x0 + b.side && b.x0 < a.x0 + a.side
}

fn thing_pixels(p: &Placement, h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    if p.category == 3 {
        // ellipse inscribed in the bounding box
        let r = p.side as f64 / 2.0;
        let cy = p.y0 as f64 + r - 0.5;
        let cx = p.x0 as f64 + r - 0.5;
        for y in p.y0..p.y0 + p.side {
            for x in p.x0..p.x0 + p.side {
                let dy = (y as f64 - cy) / r;
                let dx = (x as f64 - cx) / r;
                if dy * dy + dx * dx <= 1.0 {
                    out[y * w + x] = true;
                }
            }
        }
    } else {
        for y in p.y0..p.y0 + p.side {
            for x in p.x0..p.x0 + p.side {
                out[y * w + x] = true;
            }
        }
    }
    out
}

/// Generate sample `index` deterministically from `seed`. Sample 0 is the
/// calibration scene containing every thing category exactly once at fixed
/// positions; later samples place a random non-overlapping subset.
pub fn generate_scene(config: &ViTConfig, seed: u64, index: usize) -> Result<Scene> {
    let s = config.image_size;
    let ps = config.patch_size;
    let cells = s / ps;
    if cells < 8 {
        return Err(Error::Invalid(format!(
            "scene generation wants at least an 8x8 patch grid, got {cells}x{cells}"
        )));
    }
    let mut rng = sample_rng(seed, index);

    let placements: Vec<Placement> = if index == 0 {
        vec![
            Placement { category: 1, y0: ps, x0: ps, side: 2 * ps },
            Placement { category: 2, y0: ps, x0: 5 * ps, side: 2 * ps },
            Placement { category: 3, y0: 4 * ps, x0: 2 * ps, side: 3 * ps },
        ]
    } else {
        let mut cats = vec![1usize, 2, 3];
        for i in (1..cats.len()).rev() {
            cats.swap(i, rng.gen_range(0..=i));
        }
        cats.truncate(rng.gen_range(1..=3));
        let mut placed: Vec<Placement> = Vec::new();
        for &category in &cats {
            for _attempt in 0..20 {
                let side_cells = rng.gen_range(2..=3usize);
                let y0 = rng.gen_range(0..=cells - side_cells) * ps;
                let x0 = rng.gen_range(0..=cells - side_cells) * ps;
                let cand = Placement { category, y0, x0, side: side_cells * ps };
                if placed.iter().all(|p| !boxes_overlap(p, &cand)) {
                    placed.push(cand);
                    break;
                }
            }
        }
        if placed.is_empty() {
            return Err(Error::Invalid("scene placement failed".into()));
        }
        placed
    };

    // textured backdrop
    let mut image = Tensor::zeros(&[3, s, s]);
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let v = COLORS[0][c] + rng.gen_range(-0.04..0.04);
                image.set3(c, y, x, v);
            }
        }
    }

    // paint things and collect their masks
    let mut thing_masks: Vec<Vec<bool>> = Vec::new();
    for p in &placements {
        let pix = thing_pixels(p, s, s);
        for y in 0..s {
            for x in 0..s {
                if pix[y * s + x] {
                    for c in 0..3 {
                        let v = COLORS[p.category][c] + rng.gen_range(-0.03..0.03);
                        image.set3(c, y, x, v);
                    }
                }
            }
        }
        thing_masks.push(pix);
    }
    quantize_image(&mut image);

    // GT: backdrop complement first, then things in placement order
    let mut backdrop = vec![true; s * s];
    for pix in &thing_masks {
        for (b, &t) in backdrop.iter_mut().zip(pix) {
            if t {
                *b = false;
            }
        }
    }
    let mut gt_binary: Vec<Vec<bool>> = vec![backdrop];
    gt_binary.extend(thing_masks);
    let mut categories = vec![0usize];
    categories.extend(placements.iter().map(|p| p.category));

    let mut gt_data = Vec::with_capacity(gt_binary.len() * s * s);
    for mask in &gt_binary {
        gt_data.extend(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    let gt_masks = MaskSet::new(
        Tensor::from_vec(&[gt_binary.len(), s, s], gt_data)?,
        DEFAULT_THRESHOLD,
    )?;

    // coarse proposals: erode each GT mask by one pixel and report low,
    // noisy confidence inside the support and zero outside. Zero outside
    // keeps every localization gradient pushing the mask up, which is what
    // lets short gradient-descent runs at a small learning rate make real
    // progress instead of oscillating.
    let mut prop_data = Vec::with_capacity(gt_binary.len() * s * s);
    for mask in &gt_binary {
        let coarse = morph(mask, s, s, 1, false);
        for &b in &coarse {
            let v = if b { 0.55 + rng.gen_range(0.0..0.10) } else { 0.0 };
            prop_data.push(v);
        }
    }
    let proposals = MaskSet::new(
        Tensor::from_vec(&[gt_binary.len(), s, s], prop_data)?,
        DEFAULT_THRESHOLD,
    )?;

    Ok(Scene {
        image,
        gt_masks,
        proposals,
        categories,
    })
}

/// Build the prototype table by encoding a calibration scene's GT masks
/// and storing one mask feature per category. The scene must contain every
/// category exactly once.
pub fn prototype_table(weights: &FrozenWeights, scene: &Scene) -> Result<EmbeddingTable> {
    let out = rma::forward(&scene.image, &scene.gt_masks, weights, None, false)?;
    let mut entries: Vec<Option<TableEntry>> = vec![None; CATEGORIES.len()];
    for (i, &cat) in scene.categories.iter().enumerate() {
        if cat >= CATEGORIES.len() {
            return Err(Error::Invalid(format!("unknown category {cat}")));
        }
        if entries[cat].is_some() {
            return Err(Error::Invalid(format!(
                "calibration scene has category {cat} more than once"
            )));
        }
        entries[cat] = Some(TableEntry {
            name: CATEGORIES[cat].0.to_string(),
            is_thing: CATEGORIES[cat].1,
            vector: out.mask_features.row(i).to_vec(),
        });
    }
    let entries: Vec<TableEntry> = entries
        .into_iter()
        .enumerate()
        .map(|(cat, e)| e.ok_or_else(|| Error::Invalid(format!("category {cat} missing"))))
        .collect::<Result<_>>()?;
    EmbeddingTable::normalized(entries)
}

/// Ground-truth panoptic map from disjoint binary GT masks and their
/// categories, one segment per mask in mask order.
pub fn gt_panoptic(gt_masks: &MaskSet, categories: &[usize]) -> Result<PanopticMap> {
    if categories.len() != gt_masks.len() {
        return Err(Error::Invalid("one category per GT mask required".into()));
    }
    let h = gt_masks.height();
    let w = gt_masks.width();
    let mut ids = vec![0u32; h * w];
    let mut segments = Vec::new();
    for (i, &cat) in categories.iter().enumerate() {
        for (px, &v) in gt_masks.pixels(i).iter().enumerate() {
            if v >= gt_masks.threshold() {
                if ids[px] != 0 {
                    return Err(Error::Invalid("GT masks overlap".into()));
                }
                ids[px] = (i + 1) as u32;
            }
        }
        segments.push(PanopticSegment {
            category: cat,
            is_thing: CATEGORIES.get(cat).map(|c| c.1).unwrap_or(true),
            confidence: 1.0,
        });
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

/// Write a full dataset: weights.mcw, table.jsonl, and `n_samples` sample
/// directories. Sample 0 is the calibration scene the table is built from;
/// with n_samples = 0 the table is still built (from an unsaved calibration
/// scene).
pub fn generate_dataset(
    out_dir: &Path,
    weights: &FrozenWeights,
    n_samples: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    io::save_frozen_weights(&out_dir.join("weights.mcw"), weights)?;
    let calibration = generate_scene(&weights.config, seed, 0)?;
    let table = prototype_table(weights, &calibration)?;
    io::save_table(&out_dir.join("table.jsonl"), &table)?;
    for i in 0..n_samples {
        let scene = if i == 0 {
            calibration.clone()
        } else {
            generate_scene(&weights.config, seed, i)?
        };
        let dir = out_dir.join(format!("sample{i:03}"));
        std::fs::create_dir_all(&dir)?;
        io::save_ppm(&dir.join("image.ppm"), &scene.image)?;
        io::save_mask_set(&dir.join("masks.mcm"), &scene.proposals)?;
        io::save_mask_set(&dir.join("gt_masks.mcm"), &scene.gt_masks)?;
        let gt = io::GtInfo {
            categories: scene.categories.clone(),
        };
        io::write_atomic(&dir.join("gt.json"), &serde_json::to_vec_pretty(&gt)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_weights() -> FrozenWeights {
        FrozenWeights::seeded(ViTConfig::toy(), 11).unwrap()
    }

    #[test]
    fn gt_masks_are_disjoint_and_cover_all_pixels() {
        let cfg = ViTConfig::toy();
        for index in 0..6 {
            let scene = generate_scene(&cfg, 42, index).unwrap();
            let hw = cfg.image_size * cfg.image_size;
            let mut count = vec![0usize; hw];
            for i in 0..scene.gt_masks.len() {
                for (px, &v) in scene.gt_masks.pixels(i).iter().enumerate() {
                    assert!(v == 0.0 || v == 1.0);
                    if v == 1.0 {
                        count[px] += 1;
                    }
                }
            }
            assert!(count.iter().all(|&c| c == 1), "index {index}");
        }
    }

    #[test]
    fn calibration_scene_has_every_category_once() {
        let scene = generate_scene(&ViTConfig::toy(), 7, 0).unwrap();
        let mut cats = scene.categories.clone();
        cats.sort_unstable();
        assert_eq!(cats, vec![0, 1, 2, 3]);
    }

    #[test]
    fn scenes_are_deterministic_in_seed_and_index() {
        let cfg = ViTConfig::toy();
        let a = generate_scene(&cfg, 9, 3).unwrap();
        let b = generate_scene(&cfg, 9, 3).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.proposals.tensor().data(), b.proposals.tensor().data());
        let c = generate_scene(&cfg, 10, 3).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn image_survives_ppm_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let scene = generate_scene(&ViTConfig::toy(), 5, 1).unwrap();
        let path = dir.path().join("img.ppm");
        io::save_ppm(&path, &scene.image).unwrap();
        let loaded = io::load_ppm(&path).unwrap();
        assert_eq!(loaded.data(), scene.image.data());
    }

    #[test]
    fn proposals_overlap_their_gt_masks() {
        let scene = generate_scene(&ViTConfig::toy(), 3, 2).unwrap();
        for i in 0..scene.gt_masks.len() {
            let gt = scene.gt_masks.pixels(i);
            let prop = scene.proposals.pixels(i);
            let inter: usize = gt
                .iter()
                .zip(prop)
                .filter(|(&g, &p)| g == 1.0 && p >= 0.5)
                .count();
            let union: usize = gt
                .iter()
                .zip(prop)
                .filter(|(&g, &p)| g == 1.0 || p >= 0.5)
                .count();
            let iou = inter as f64 / union as f64;
            assert!(iou > 0.3, "mask {i} iou {iou}");
            assert!(iou < 1.0, "mask {i} was not perturbed");
        }
    }

    #[test]
    fn morph_erode_then_dilate_shrinks_into_original() {
        let mut mask = vec![false; 64];
        for y in 2..6 {
            for x in 2..6 {
                mask[y * 8 + x] = true;
            }
        }
        let eroded = morph(&mask, 8, 8, 1, false);
        assert_eq!(eroded.iter().filter(|&&b| b).count(), 4);
        let back = morph(&eroded, 8, 8, 1, true);
        // reopening stays inside the original square
        for (i, &b) in back.iter().enumerate() {
            assert!(!b || mask[i]);
        }
    }

    #[test]
    fn prototype_table_self_retrieval_is_exact() {
        let weights = toy_weights();
        let scene = generate_scene(&weights.config, 13, 0).unwrap();
        let table = prototype_table(&weights, &scene).unwrap();
        assert_eq!(table.len(), CATEGORIES.len());
        let out = rma::forward(&scene.image, &scene.gt_masks, &weights, None, false).unwrap();
        for (i, &cat) in scene.categories.iter().enumerate() {
            let scores =
                crate::pipeline::classify(&out.mask_features, &table, 100.0).unwrap();
            let row = scores.row(i);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(best, cat);
        }
    }

    #[test]
    fn dataset_written_twice_is_byte_identical() {
        let weights = toy_weights();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_dataset(d1.path(), &weights, 2, 77).unwrap();
        generate_dataset(d2.path(), &weights, 2, 77).unwrap();
        for rel in [
            "weights.mcw",
            "table.jsonl",
            "sample000/image.ppm",
            "sample000/masks.mcm",
            "sample001/gt_masks.mcm",
            "sample001/gt.json",
        ] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn empty_dataset_still_has_a_valid_table() {
        let weights = toy_weights();
        let dir = tempdir().unwrap();
        generate_dataset(dir.path(), &weights, 0, 1).unwrap();
        let table = io::load_table(&dir.path().join("table.jsonl")).unwrap();
        assert_eq!(table.len(), CATEGORIES.len());
        let (samples, _) = io::load_dataset(dir.path()).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn gt_panoptic_has_no_void_and_one_stuff_segment() {
        let scene = generate_scene(&ViTConfig::toy(), 21, 0).unwrap();
        let map = gt_panoptic(&scene.gt_masks, &scene.categories).unwrap();
        assert!(map.ids.iter().all(|&id| id != 0));
        let stuff = map.segments.iter().filter(|s| !s.is_thing).count();
        assert_eq!(stuff, 1);
    }
}
