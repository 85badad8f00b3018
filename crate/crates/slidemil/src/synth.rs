//! Synthetic witness-task dataset for desk-scale verification.
//!
//! Each patient gets one slide laid out on a 4x4 grid of tile-sized
//! cells: a couple of blank-glass cells (constant color, zero entropy),
//! noise-textured tissue cells, and four designated tumor cells covered
//! by the annotation mask. Node-positive patients carry witness cells
//! inside the tumor region — red-shifted noise with a distinct color
//! signature — two for N1-2 and four for N2+, so the bag label is
//! predictable from whether a bag contains witness instances (and how
//! many). The clinical CSV is generated with matching labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clinical::AlnLabel;
use crate::error::{Error, Result};
use crate::imagery::RgbImage;
use crate::seed::{rng_from, subseed};

pub const GRID: usize = 4;
pub const BLANK_CELLS: usize = 2;
pub const TUMOR_CELLS: usize = 4;

/// Witness signature bounds: red channel high, green/blue low. The
/// ranges stay wide enough that witness patches carry well over the
/// default 5 bits of grayscale entropy and survive the blank-glass
/// filter, while the channel means separate cleanly from tissue.
const WITNESS_R: (u8, u8) = (200, 255);
const WITNESS_GB: (u8, u8) = (20, 100);
/// Tissue noise band: mid-gray mean, moderate spread. Keeps entropy high
/// (~6 bits) without drowning the witness signal in texture extremes.
const TISSUE: (u8, u8) = (88, 168);
const BLANK_COLOR: [u8; 3] = [244, 242, 245];

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub n_patients: usize,
    pub seed: u64,
    /// Cell side length; slides are GRID*tile_size pixels square.
    pub tile_size: usize,
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub slides_dir: PathBuf,
    pub masks_dir: PathBuf,
    pub clinical_csv: PathBuf,
    pub labels: BTreeMap<String, AlnLabel>,
}

fn label_for(index: usize) -> AlnLabel {
    match index % 4 {
        0 | 2 => AlnLabel::N0,
        1 => AlnLabel::N1To2,
        _ => AlnLabel::N2Plus,
    }
}

fn witness_cells_for(label: AlnLabel) -> usize {
    match label {
        AlnLabel::N0 => 0,
        AlnLabel::N1To2 => 2,
        AlnLabel::N2Plus => TUMOR_CELLS,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum CellKind {
    Blank,
    Tissue,
    Tumor { witness: bool },
}

fn fill_cell(img: &mut RgbImage, cx: usize, cy: usize, ts: usize, kind: CellKind, rng: &mut ChaCha8Rng) {
    for y in cy * ts..(cy + 1) * ts {
        for x in cx * ts..(cx + 1) * ts {
            let px = match kind {
                CellKind::Blank => BLANK_COLOR,
                CellKind::Tissue | CellKind::Tumor { witness: false } => [
                    rng.gen_range(TISSUE.0..=TISSUE.1),
                    rng.gen_range(TISSUE.0..=TISSUE.1),
                    rng.gen_range(TISSUE.0..=TISSUE.1),
                ],
                CellKind::Tumor { witness: true } => [
                    rng.gen_range(WITNESS_R.0..=WITNESS_R.1),
                    rng.gen_range(WITNESS_GB.0..=WITNESS_GB.1),
                    rng.gen_range(WITNESS_GB.0..=WITNESS_GB.1),
                ],
            };
            img.set_pixel(x, y, px);
        }
    }
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
        .expect("consistent buffer");
    buf.save(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Generate the dataset under `out_dir`: slides/, masks/ and
/// clinical.csv. Byte-identical for a fixed (seed, options) pair.
pub fn generate(out_dir: &Path, opts: &SynthOptions) -> Result<SynthSummary> {
    if opts.tile_size == 0 {
        return Err(Error::Config("tile_size must be >= 1".into()));
    }
    let slides_dir = out_dir.join("slides");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&slides_dir).map_err(|e| Error::io(&slides_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let ts = opts.tile_size;
    let side = GRID * ts;
    let mut labels = BTreeMap::new();
    let mut csv = String::from(
        "patient_id,age,tumor_size,tumor_type,er,pr,her2,her2_expr,grade,surgery,ki67,subtype,lnm_count,aln_label\n",
    );

    for i in 0..opts.n_patients {
        let patient_id = format!("P{i:04}");
        let label = label_for(i);
        labels.insert(patient_id.clone(), label);
        let mut rng = rng_from(subseed(opts.seed, &patient_id));

        // Assign cell roles: blanks, then tumor cells (witness-first).
        let mut cell_order: Vec<usize> = (0..GRID * GRID).collect();
        cell_order.shuffle(&mut rng);
        let mut kinds = [CellKind::Tissue; GRID * GRID];
        for &c in cell_order.iter().take(BLANK_CELLS) {
            kinds[c] = CellKind::Blank;
        }
        let witnesses = witness_cells_for(label);
        for (j, &c) in cell_order
            .iter()
            .skip(BLANK_CELLS)
            .take(TUMOR_CELLS)
            .enumerate()
        {
            kinds[c] = CellKind::Tumor { witness: j < witnesses };
        }

        let mut slide = RgbImage::filled(side, side, [0, 0, 0]);
        for cy in 0..GRID {
            for cx in 0..GRID {
                fill_cell(&mut slide, cx, cy, ts, kinds[cy * GRID + cx], &mut rng);
            }
        }
        save_rgb(&slide, &slides_dir.join(format!("{patient_id}.png")))?;

        let mut mask = image::GrayImage::new(side as u32, side as u32);
        for cy in 0..GRID {
            for cx in 0..GRID {
                if matches!(kinds[cy * GRID + cx], CellKind::Tumor { .. }) {
                    for y in cy * ts..(cy + 1) * ts {
                        for x in cx * ts..(cx + 1) * ts {
                            mask.put_pixel(x as u32, y as u32, image::Luma([255]));
                        }
                    }
                }
            }
        }
        let mask_path = masks_dir.join(format!("{patient_id}.png"));
        mask.save(&mask_path).map_err(|e| Error::ImageDecode {
            path: mask_path.clone(),
            reason: e.to_string(),
        })?;

        // Clinical row with label-consistent node count and loosely
        // label-correlated tumor size.
        let age: u32 = rng.gen_range(30..=80);
        let tumor_size = match label {
            AlnLabel::N0 => f64::from(rng.gen_range(8..=28)) / 10.0,
            _ => f64::from(rng.gen_range(22..=55)) / 10.0,
        };
        let tumor_type = ["IDC", "ILC", "Mucinous"][rng.gen_range(0..3)];
        let er = u8::from(rng.gen_bool(0.6));
        let pr = u8::from(rng.gen_bool(0.55));
        let her2 = u8::from(rng.gen_bool(0.3));
        let her2_expr = if her2 == 1 {
            ["2+", "3+"][rng.gen_range(0..2)]
        } else {
            ["0", "1+"][rng.gen_range(0..2)]
        };
        let grade = rng.gen_range(1..=3);
        let surgery = if rng.gen_bool(0.5) { "ALND" } else { "SLNB" };
        let ki67: u32 = rng.gen_range(5..=80);
        let subtype = ["LuminalA", "LuminalB", "HER2", "TripleNegative"][rng.gen_range(0..4)];
        let lnm_count: u32 = match label {
            AlnLabel::N0 => 0,
            AlnLabel::N1To2 => rng.gen_range(1..=2),
            AlnLabel::N2Plus => rng.gen_range(3..=9),
        };
        csv.push_str(&format!(
            "{patient_id},{age},{tumor_size:.1},{tumor_type},{er},{pr},{her2},{her2_expr},{grade},{surgery},{ki67},{subtype},{lnm_count},{}\n",
            label.as_str()
        ));
    }

    let clinical_csv = out_dir.join("clinical.csv");
    std::fs::write(&clinical_csv, csv).map_err(|e| Error::io(&clinical_csv, e))?;
    Ok(SynthSummary {
        slides_dir,
        masks_dir,
        clinical_csv,
        labels,
    })
}

/// True when a patch's channel statistics match the witness signature.
/// Used by tests to confirm planted cells exist.
pub fn looks_like_witness(img: &RgbImage) -> bool {
    let n = (img.width() * img.height()) as f64;
    let mut sums = [0.0f64; 3];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.pixel(x, y);
            for c in 0..3 {
                sums[c] += f64::from(px[c]);
            }
        }
    }
    let mean_r = sums[0] / n;
    let mean_g = sums[1] / n;
    let mean_b = sums[2] / n;
    mean_r > 140.0 && mean_g < 70.0 && mean_b < 70.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::parse_clinical;
    use crate::imagery::{load_image, load_mask, shannon_entropy, tile_slide};

    fn options(n: usize) -> SynthOptions {
        SynthOptions {
            n_patients: n,
            seed: 5,
            tile_size: 32,
        }
    }

    #[test]
    fn generates_counted_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(dir.path(), &options(10)).unwrap();
        let slides: Vec<_> = std::fs::read_dir(&summary.slides_dir).unwrap().collect();
        assert_eq!(slides.len(), 10);
        let records = parse_clinical(&summary.clinical_csv).unwrap();
        assert_eq!(records.len(), 10);
        for r in &records {
            assert_eq!(r.aln_label, summary.labels[&r.patient_id]);
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_dataset() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(a.path(), &options(6)).unwrap();
        generate(b.path(), &options(6)).unwrap();
        for sub in ["slides", "masks"] {
            for i in 0..6 {
                let name = format!("{sub}/P{i:04}.png");
                let x = std::fs::read(a.path().join(&name)).unwrap();
                let y = std::fs::read(b.path().join(&name)).unwrap();
                assert_eq!(x, y, "{name} differs");
            }
        }
        assert_eq!(
            std::fs::read(a.path().join("clinical.csv")).unwrap(),
            std::fs::read(b.path().join("clinical.csv")).unwrap()
        );
    }

    #[test]
    fn slides_round_trip_at_512() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            n_patients: 1,
            seed: 9,
            tile_size: 128,
        };
        let summary = generate(dir.path(), &opts).unwrap();
        let img = load_image(&summary.slides_dir.join("P0000.png")).unwrap();
        assert_eq!((img.width(), img.height()), (512, 512));
    }

    #[test]
    fn positive_slides_carry_witness_patches_negative_do_not() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(dir.path(), &options(8)).unwrap();
        for (patient, label) in &summary.labels {
            let img = load_image(&summary.slides_dir.join(format!("{patient}.png"))).unwrap();
            let patches = tile_slide(patient, &img, 32, 32, None, 0.5).unwrap();
            let witnesses = patches.iter().filter(|p| looks_like_witness(&p.pixels)).count();
            assert_eq!(witnesses, witness_cells_for(*label), "{patient}");
        }
    }

    #[test]
    fn masks_cover_exactly_the_tumor_cells() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(dir.path(), &options(4)).unwrap();
        for patient in summary.labels.keys() {
            let img = load_image(&summary.slides_dir.join(format!("{patient}.png"))).unwrap();
            let mask = load_mask(&summary.masks_dir.join(format!("{patient}.png"))).unwrap();
            let masked = tile_slide(patient, &img, 32, 32, Some(&mask), 0.5).unwrap();
            assert_eq!(masked.len(), TUMOR_CELLS);
        }
    }

    #[test]
    fn blank_cells_have_zero_entropy_and_get_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(dir.path(), &options(3)).unwrap();
        for patient in summary.labels.keys() {
            let img = load_image(&summary.slides_dir.join(format!("{patient}.png"))).unwrap();
            let patches = tile_slide(patient, &img, 32, 32, None, 0.5).unwrap();
            let blanks = patches.iter().filter(|p| p.entropy_bits == 0.0).count();
            assert_eq!(blanks, BLANK_CELLS);
            // all non-blank cells clear the default threshold
            for p in &patches {
                if p.entropy_bits > 0.0 {
                    assert!(p.entropy_bits > 5.0, "{}", p.entropy_bits);
                }
            }
            let _ = shannon_entropy(&img);
        }
    }
}
