//! Ground-truth mask synthesis for an expression over a label map.
//!
//! 1. Resolve the expression head to a set of raw class ids.
//! 2. Build the union mask of those classes.
//! 3. If the expression carries a spatial relation, split the mask into
//!    connected instances and keep only those whose buffer ring satisfies
//!    the relation against the reference category's mask.
//!
//! The ring of an instance is its square dilation by `buffer_radius`
//! minus the instance itself. Adjacency asks for any reference pixel in
//! the ring; containment asks for a minimum fraction of the ring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprgen::Expression;
use crate::raster::{
    class_mask, connected_components, dilate, BinaryMask, Connectivity, LabelMap, RasterError,
};
use crate::taxonomy::{resolve_category, ContainmentStrength, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum MaskGenError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("invalid predicate config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialPredicateConfig {
    pub buffer_radius: usize,
    pub tau_on: f64,
    pub tau_surround: f64,
    pub connectivity: Connectivity,
}

impl Default for SpatialPredicateConfig {
    /// 3 px at 512 px scale is roughly 0.9 m on the ground.
    fn default() -> Self {
        Self {
            buffer_radius: 3,
            tau_on: 0.5,
            tau_surround: 0.8,
            connectivity: Connectivity::Eight,
        }
    }
}

impl SpatialPredicateConfig {
    pub fn validate(&self) -> Result<(), MaskGenError> {
        let ok = (0.0..=1.0).contains(&self.tau_on)
            && (0.0..=1.0).contains(&self.tau_surround)
            && self.tau_on <= self.tau_surround;
        if !ok {
            return Err(MaskGenError::InvalidConfig(format!(
                "need 0 <= tau_on ({}) <= tau_surround ({}) <= 1",
                self.tau_on, self.tau_surround
            )));
        }
        Ok(())
    }

    pub fn threshold(&self, strength: ContainmentStrength) -> f64 {
        match strength {
            ContainmentStrength::On => self.tau_on,
            ContainmentStrength::Surrounded => self.tau_surround,
        }
    }
}

/// Union mask of the classes an expression head resolves to.
pub fn category_mask(
    map: &LabelMap,
    tax: &Taxonomy,
    category: &str,
    attribute: Option<&str>,
) -> Result<BinaryMask, MaskGenError> {
    let ids = resolve_category(tax, category, attribute)?;
    Ok(class_mask(map, &ids)?)
}

/// Sorted row-major indices of the ring around `instance`. Dilation is
/// done inside the instance's bounding box grown by the radius, which
/// contains every pixel the full-frame dilation could set.
fn ring_indices(instance: &[usize], radius: usize, dims: (usize, usize)) -> Vec<usize> {
    let (w, h) = dims;
    if radius == 0 || instance.is_empty() {
        return Vec::new();
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &i in instance {
        let (x, y) = (i % w, i / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let bx0 = x0.saturating_sub(radius);
    let by0 = y0.saturating_sub(radius);
    let bx1 = (x1 + radius).min(w - 1);
    let by1 = (y1 + radius).min(h - 1);
    let (lw, lh) = (bx1 - bx0 + 1, by1 - by0 + 1);

    let mut local = BinaryMask::empty(lw, lh);
    for &i in instance {
        local.set(i % w - bx0, i / w - by0, true);
    }
    let grown = dilate(&local, radius);
    let mut out = Vec::new();
    for ly in 0..lh {
        for lx in 0..lw {
            if grown.get(lx, ly) && !local.get(lx, ly) {
                out.push((ly + by0) * w + lx + bx0);
            }
        }
    }
    out
}

/// Buffer ring: `dilate(instance, buffer_radius) \ instance`.
pub fn ring(instance: &[usize], cfg: &SpatialPredicateConfig, dims: (usize, usize)) -> BinaryMask {
    BinaryMask::from_indices(dims.0, dims.1, &ring_indices(instance, cfg.buffer_radius, dims))
}

fn ring_overlap(instance: &[usize], reference: &BinaryMask, radius: usize) -> (usize, usize) {
    let ring = ring_indices(instance, radius, reference.dims());
    let bits = reference.bits();
    let hits = ring.iter().filter(|&&i| bits[i]).count();
    (hits, ring.len())
}

/// Some reference pixel lies in the instance's buffer ring.
pub fn adjacency_holds(
    instance: &[usize],
    reference: &BinaryMask,
    cfg: &SpatialPredicateConfig,
) -> bool {
    ring_overlap(instance, reference, cfg.buffer_radius).0 > 0
}

/// Fraction of the ring covered by the reference reaches the threshold for
/// `strength`. An empty ring never satisfies containment, whatever the
/// threshold.
pub fn containment_holds(
    instance: &[usize],
    reference: &BinaryMask,
    cfg: &SpatialPredicateConfig,
    strength: ContainmentStrength,
) -> bool {
    let (hits, total) = ring_overlap(instance, reference, cfg.buffer_radius);
    total > 0 && hits as f64 / total as f64 >= cfg.threshold(strength)
}

/// Ground-truth mask for `expr`; may be empty when no instance satisfies
/// the relation.
pub fn generate_mask(
    map: &LabelMap,
    tax: &Taxonomy,
    expr: &Expression,
    cfg: &SpatialPredicateConfig,
) -> Result<BinaryMask, MaskGenError> {
    let subject = category_mask(map, tax, &expr.category, expr.attribute.as_deref())?;
    let Some(rel_name) = expr.relation.as_deref() else {
        return Ok(subject);
    };
    let rel = tax
        .relation(rel_name)
        .ok_or_else(|| TaxonomyError::UnknownRelation(rel_name.to_string()))?;
    let reference = category_mask(map, tax, &rel.reference_category, None)?;
    let strength = rel.strength();

    let mut out = BinaryMask::empty(map.width(), map.height());
    for inst in connected_components(&subject, cfg.connectivity).instances {
        let keep = match strength {
            None => adjacency_holds(&inst, &reference, cfg),
            Some(s) => containment_holds(&inst, &reference, cfg, s),
        };
        if keep {
            for i in inst {
                out.set(i % map.width(), i / map.width(), true);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::LabelMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(radius: usize) -> SpatialPredicateConfig {
        SpatialPredicateConfig {
            buffer_radius: radius,
            ..Default::default()
        }
    }

    fn chebyshev(a: usize, b: usize, w: usize) -> usize {
        let (ax, ay) = ((a % w) as isize, (a / w) as isize);
        let (bx, by) = ((b % w) as isize, (b / w) as isize);
        (ax - bx).unsigned_abs().max((ay - by).unsigned_abs())
    }

    #[test]
    fn ring_of_single_pixel() {
        let dims = (5, 5);
        let r = ring(&[12], &cfg(1), dims);
        assert_eq!(r.count(), 8);
        assert!(!r.get(2, 2));
        assert!(ring(&[12], &cfg(0), dims).is_empty());
        // Corner pixel: ring clipped by the frame.
        assert_eq!(ring(&[0], &cfg(1), dims).count(), 3);
    }

    #[test]
    fn ring_matches_distance_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (w, h) = (19, 13);
        for _ in 0..100 {
            let radius = rng.random_range(0..4);
            let seed = rng.random_range(0..w * h);
            let mut inst: Vec<usize> = (0..w * h)
                .filter(|&i| chebyshev(i, seed, w) <= 1 && rng.random_bool(0.7))
                .collect();
            if inst.is_empty() {
                inst.push(seed);
            }
            let got = ring(&inst, &cfg(radius), (w, h));
            for p in 0..w * h {
                let d = inst.iter().map(|&q| chebyshev(p, q, w)).min().unwrap();
                let want = d >= 1 && d <= radius;
                assert_eq!(got.bits()[p], want, "pixel {p} radius {radius}");
            }
        }
    }

    #[test]
    fn adjacency_distance_cases() {
        let (w, h) = (12, 3);
        let inst = [w + 1];
        let touching = BinaryMask::from_points(w, h, &[(2, 1)]);
        assert!(adjacency_holds(&inst, &touching, &cfg(1)));
        let far = BinaryMask::from_points(w, h, &[(6, 1)]);
        assert!(!adjacency_holds(&inst, &far, &cfg(3)));
        assert!(adjacency_holds(&inst, &far, &cfg(5)));
    }

    #[test]
    fn containment_fraction_fixture() {
        // 7x7 frame, 1-pixel instance at the centre, radius 1: ring is the
        // 8 neighbours. Reference covers the top row and the left pixel of
        // the middle row of that ring: 4 of 8 = 0.5.
        let inst = [3 * 7 + 3];
        let reference = BinaryMask::from_points(7, 7, &[(2, 2), (3, 2), (4, 2), (2, 3)]);
        let c = SpatialPredicateConfig {
            buffer_radius: 1,
            tau_on: 0.5,
            tau_surround: 0.8,
            connectivity: Connectivity::Eight,
        };
        assert!(containment_holds(&inst, &reference, &c, ContainmentStrength::On));
        assert!(!containment_holds(&inst, &reference, &c, ContainmentStrength::Surrounded));

        let mut full = BinaryMask::from_points(7, 7, &[]);
        for y in 2..=4 {
            for x in 2..=4 {
                full.set(x, y, (x, y) != (3, 3));
            }
        }
        assert!(containment_holds(&inst, &full, &c, ContainmentStrength::Surrounded));
        let zero = SpatialPredicateConfig { buffer_radius: 0, tau_on: 0.0, ..c };
        assert!(!containment_holds(&inst, &full, &zero, ContainmentStrength::On));
    }

    #[test]
    fn radius_monotone_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let bits = (0..20 * 20).map(|_| rng.random_bool(0.05)).collect();
            let reference = BinaryMask::new(20, 20, bits).unwrap();
            let inst = vec![rng.random_range(0..400)];
            let mut seen = false;
            for r in 0..6 {
                let now = adjacency_holds(&inst, &reference, &cfg(r));
                assert!(!seen || now);
                seen |= now;
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SpatialPredicateConfig::default().validate().is_ok());
        let bad = SpatialPredicateConfig {
            tau_on: 0.9,
            tau_surround: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    /// 16x16 scene: a road band in rows 0..=5, grass elsewhere, one car on
    /// the road and one in the grass.
    fn two_car_scene(tax: &Taxonomy) -> LabelMap {
        let road = tax.class_id("paved road").unwrap();
        let grass = tax.class_id("low vegetation").unwrap();
        let car = tax.class_id("car").unwrap();
        let mut map = LabelMap::filled(16, 16, grass).unwrap();
        for y in 0..6 {
            for x in 0..16 {
                map.set(x, y, road);
            }
        }
        for (x, y) in [(3, 2), (4, 2), (3, 3), (4, 3)] {
            map.set(x, y, car);
        }
        for (x, y) in [(10, 11), (11, 11), (10, 12), (11, 12)] {
            map.set(x, y, car);
        }
        map
    }

    #[test]
    fn car_on_the_road_keeps_only_road_instance() {
        let tax = Taxonomy::refsegrs();
        let map = two_car_scene(&tax);
        let expr = Expression::build(&tax, "car", None, Some("on the road")).unwrap();
        let got = generate_mask(&map, &tax, &expr, &cfg(2)).unwrap();
        let want = BinaryMask::from_points(16, 16, &[(3, 2), (4, 2), (3, 3), (4, 3)]);
        assert_eq!(got, want);

        let plain = Expression::build(&tax, "vehicle", None, None).unwrap();
        assert_eq!(
            generate_mask(&map, &tax, &plain, &cfg(2)).unwrap(),
            category_mask(&map, &tax, "vehicle", None).unwrap()
        );
        assert!(category_mask(&map, &tax, "building", None).unwrap().is_empty());
    }

    #[test]
    fn vehicle_mask_is_union_of_subclasses() {
        let tax = Taxonomy::refsegrs();
        let car = tax.class_id("car").unwrap();
        let van = tax.class_id("van").unwrap();
        let map = LabelMap::new(3, 1, vec![car, 0, van]).unwrap();
        let m = category_mask(&map, &tax, "vehicle", None).unwrap();
        assert_eq!(m.bits(), &[true, false, true]);
    }
}
