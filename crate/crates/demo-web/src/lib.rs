//! Browser bindings: mask schedule curve, phantom slices and a mask
//! selection view. Slices are returned as RGBA bytes, row-major over
//! `(x, y)` at a fixed depth `z`.

use anatomask::maskgen::{anatomask, random_mask, unit_losses, MaskSchedule, PatchGrid, Significance};
use anatomask::rng::seeded;
use anatomask::volume::{gen_phantom, znorm, PhantomSpec};
use anatomask::{LabelVolume, Volume};
use wasm_bindgen::prelude::*;

/// Mask ratio `r_t` for every epoch `0..=total`.
#[wasm_bindgen]
pub fn schedule_curve(r0: f64, r_end: f64, total: u32) -> Result<Vec<f64>, JsError> {
    let s = MaskSchedule::new(r0, r_end, total as u64)?;
    Ok((0..=total as u64).map(|t| s.ratio_at(t as f64)).collect())
}

const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [220, 120, 60], [200, 40, 60], [240, 230, 200]];

fn phantom(seed: u64, side: usize) -> Result<(Volume, LabelVolume), JsError> {
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let p = gen_phantom(&spec, [side; 3], [1.5; 3], &mut seeded(seed))?;
    Ok((znorm(&p.image), p.labels))
}

fn gray(v: f32) -> u8 {
    ((v.clamp(-2.0, 3.0) + 2.0) / 5.0 * 255.0) as u8
}

fn rgba(pixels: impl Iterator<Item = [u8; 3]>) -> Vec<u8> {
    pixels.flat_map(|[r, g, b]| [r, g, b, 255]).collect()
}

fn blend(a: [u8; 3], b: [u8; 3], alpha: f32) -> [u8; 3] {
    [0, 1, 2].map(|i| (a[i] as f32 * (1.0 - alpha) + b[i] as f32 * alpha) as u8)
}

/// Slice `z` of a phantom, grey image with a label overlay of opacity
/// `overlay` in `[0, 1]`.
#[wasm_bindgen]
pub fn phantom_slice(seed: u64, side: usize, z: usize, overlay: f32) -> Result<Vec<u8>, JsError> {
    let (image, labels) = phantom(seed, side)?;
    let z = z.min(side - 1);
    Ok(rgba((0..side * side).map(|i| {
        let (x, y) = (i % side, i / side);
        let g = gray(image.get(x, y, z));
        let l = labels.get(x, y, z) as usize;
        if l == 0 {
            [g; 3]
        } else {
            blend([g; 3], PALETTE[l % PALETTE.len()], overlay.clamp(0.0, 1.0))
        }
    })))
}

/// Loss-guided mask over slice `z`. The unit losses come from a stand-in
/// reconstruction (the mean of the visible voxels), so units holding more
/// structure score higher. Loss-selected units are tinted red, randomly
/// filled units blue; the last four bytes carry no pixel but the counts
/// `[selected, filled]` as two little-endian `u16`.
#[wasm_bindgen]
pub fn mask_slice(seed: u64, side: usize, unit: usize, gamma: f64, r_t: f64, z: usize) -> Result<Vec<u8>, JsError> {
    let (image, _) = phantom(seed, side)?;
    let grid = PatchGrid::for_volume([side; 3], [unit; 3])?;
    let mut rng = seeded(seed ^ 0x5eed);
    let initial = random_mask(&grid, gamma, &mut rng)?;
    let visible = initial.visibility();
    let (sum, count) = image
        .data()
        .iter()
        .zip(&visible)
        .filter(|(_, &v)| v)
        .fold((0.0f64, 0usize), |(s, c), (&x, _)| (s + x as f64, c + 1));
    let fill = if count > 0 { (sum / count as f64) as f32 } else { 0.0 };
    let recon = Volume::filled([side; 3], image.spacing(), fill)?;
    let losses = unit_losses(&recon, &image, &initial)?;
    let mask = anatomask(&losses, &initial, gamma, r_t, Significance::High, &mut rng)?;

    let b = mask.len();
    let k = ((r_t * b as f64).ceil() as usize).min(b);
    let mut ranked: Vec<(usize, f64)> = losses.entries().iter().map(|(&u, &l)| (u, l)).collect();
    ranked.sort_by(|a, c| c.1.total_cmp(&a.1));
    let mut selected = vec![false; grid.n()];
    for &(u, _) in &ranked[..k] {
        selected[u] = true;
    }
    let z = z.min(side - 1);
    let mut out = rgba((0..side * side).map(|i| {
        let (x, y) = (i % side, i / side);
        let g = [gray(image.get(x, y, z)); 3];
        let u = grid.unit_of(x, y, z);
        match (mask.contains(u), selected[u]) {
            (true, true) => blend(g, [230, 40, 40], 0.55),
            (true, false) => blend(g, [40, 90, 230], 0.55),
            _ => g,
        }
    }));
    out.extend((k as u16).to_le_bytes());
    out.extend(((b - k) as u16).to_le_bytes());
    Ok(out)
}
