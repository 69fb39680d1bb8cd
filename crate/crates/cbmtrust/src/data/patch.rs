//! Patch-drop masking: zero a region of the image, either the related
//! ground-truth region or an area-matched random one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::schema::{ImageSample, Rect};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropRegion {
    Rect(Rect),
    /// Pixels with `(r - center.0)^2 + (c - center.1)^2 <= radius^2`.
    Disk { center: (f64, f64), radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropMode {
    /// Drop the given region as-is.
    Related,
    /// Drop a same-shape region placed uniformly at random (fully inside the
    /// image, so the zeroed area matches exactly).
    Random { seed: u64 },
}

/// Number of pixels a rectangle covers after clipping to `h x w` bounds.
pub fn rect_pixel_count(rect: &Rect, h: usize, w: usize) -> usize {
    if rect.is_empty() || rect.top >= h || rect.left >= w {
        return 0;
    }
    let rows = rect.height.min(h - rect.top);
    let cols = rect.width.min(w - rect.left);
    rows * cols
}

fn zero_rect(sample: &mut ImageSample, rect: &Rect) {
    let (h, w) = (sample.height(), sample.width());
    if rect.is_empty() || rect.top >= h || rect.left >= w {
        return;
    }
    let bottom = rect.bottom().min(h - 1);
    let right = rect.right().min(w - 1);
    let data = sample.image.data_mut();
    for ch in 0..3 {
        for r in rect.top..=bottom {
            let row = &mut data[(ch * h + r) * w + rect.left..(ch * h + r) * w + right + 1];
            row.fill(0.0);
        }
    }
}

fn zero_disk(sample: &mut ImageSample, center: (f64, f64), radius: f64) {
    if radius < 0.0 {
        return;
    }
    let (h, w) = (sample.height(), sample.width());
    let data = sample.image.data_mut();
    let r_lo = ((center.0 - radius).ceil().max(0.0)) as usize;
    let r_hi = ((center.0 + radius).floor().min((h - 1) as f64)).max(-1.0) as i64;
    for r in r_lo as i64..=r_hi {
        let dr = r as f64 - center.0;
        let span = (radius * radius - dr * dr).sqrt();
        if span.is_nan() {
            continue;
        }
        let c_lo = ((center.1 - span).ceil().max(0.0)) as usize;
        let c_hi = (center.1 + span).floor().min((w - 1) as f64);
        if c_hi < c_lo as f64 {
            continue;
        }
        let c_hi = c_hi as usize;
        for ch in 0..3 {
            let row = &mut data[(ch * h + r as usize) * w + c_lo..(ch * h + r as usize) * w + c_hi + 1];
            row.fill(0.0);
        }
    }
}

/// Returns a copy of `sample` with the pixels of the (possibly relocated)
/// region set to zero; the original is untouched. Regions reaching outside
/// the image are clipped.
pub fn apply_patch_drop(sample: &ImageSample, region: &DropRegion, mode: DropMode) -> ImageSample {
    let mut out = sample.clone();
    let (h, w) = (sample.height(), sample.width());
    let placed = match mode {
        DropMode::Related => *region,
        DropMode::Random { seed } => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            match *region {
                DropRegion::Rect(r) => {
                    if r.is_empty() || r.height > h || r.width > w {
                        DropRegion::Rect(r)
                    } else {
                        DropRegion::Rect(Rect {
                            top: rng.gen_range(0..=h - r.height),
                            left: rng.gen_range(0..=w - r.width),
                            height: r.height,
                            width: r.width,
                        })
                    }
                }
                DropRegion::Disk { radius, .. } => {
                    let rad = radius.max(0.0);
                    let lo_r = rad.min((h - 1) as f64);
                    let hi_r = ((h - 1) as f64 - rad).max(lo_r);
                    let lo_c = rad.min((w - 1) as f64);
                    let hi_c = ((w - 1) as f64 - rad).max(lo_c);
                    DropRegion::Disk {
                        center: (rng.gen_range(lo_r..=hi_r), rng.gen_range(lo_c..=hi_c)),
                        radius: rad,
                    }
                }
            }
        }
    };
    match placed {
        DropRegion::Rect(r) => zero_rect(&mut out, &r),
        DropRegion::Disk { center, radius } => zero_disk(&mut out, center, radius),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorSpec};

    fn sample() -> ImageSample {
        let spec = GeneratorSpec {
            image_size: 48,
            train_per_category: 1,
            test_per_category: 0,
            glyph_half: 7,
            jitter: 2,
            ..GeneratorSpec::default()
        };
        generate_synthetic_dataset(&spec).unwrap().samples[0].clone()
    }

    #[test]
    fn whole_image_drop_zeroes_everything() {
        let s = sample();
        let region = DropRegion::Rect(Rect { top: 0, left: 0, height: 48, width: 48 });
        let dropped = apply_patch_drop(&s, &region, DropMode::Related);
        assert!(dropped.image.data().iter().all(|&v| v == 0.0));
        assert!(s.image.data().iter().any(|&v| v != 0.0), "original untouched");
    }

    #[test]
    fn empty_region_changes_nothing() {
        let s = sample();
        let region = DropRegion::Rect(Rect { top: 3, left: 3, height: 0, width: 5 });
        let dropped = apply_patch_drop(&s, &region, DropMode::Related);
        assert_eq!(dropped.image, s.image);
    }

    #[test]
    fn disk_zero_count_matches_enumeration_oracle() {
        let mut base = sample();
        // constant image so zeroed pixels are exactly the disk
        for v in base.image.data_mut() {
            *v = 1.0;
        }
        for (center, radius) in [((10.0, 12.0), 6.3), ((0.5, 0.5), 4.0), ((40.0, 40.0), 9.9)] {
            let dropped = apply_patch_drop(
                &base,
                &DropRegion::Disk { center, radius },
                DropMode::Related,
            );
            let zeroed = dropped.image.data()[..48 * 48]
                .iter()
                .filter(|&&v| v == 0.0)
                .count();
            // oracle: enumerate every pixel against the disk inequality
            let mut expected = 0;
            for r in 0..48 {
                for c in 0..48 {
                    let (dr, dc) = (r as f64 - center.0, c as f64 - center.1);
                    if dr * dr + dc * dc <= radius * radius {
                        expected += 1;
                    }
                }
            }
            assert_eq!(zeroed, expected, "center {center:?} radius {radius}");
        }
    }

    #[test]
    fn random_mode_is_seeded_and_area_matched() {
        let mut base = sample();
        for v in base.image.data_mut() {
            *v = 1.0;
        }
        let region = DropRegion::Rect(Rect { top: 5, left: 5, height: 9, width: 11 });
        let a = apply_patch_drop(&base, &region, DropMode::Random { seed: 3 });
        let b = apply_patch_drop(&base, &region, DropMode::Random { seed: 3 });
        assert_eq!(a.image, b.image);
        let zeroed = a.image.data()[..48 * 48].iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeroed, 9 * 11);
    }

    #[test]
    fn out_of_bounds_region_is_clipped() {
        let s = sample();
        let region = DropRegion::Rect(Rect { top: 40, left: 40, height: 20, width: 20 });
        let dropped = apply_patch_drop(&s, &region, DropMode::Related);
        let zeroed = dropped.image.data()[..48 * 48].iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeroed, 8 * 8);
    }
}
