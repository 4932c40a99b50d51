//! Procedural aerial-style label maps over the bundled class vocabulary:
//! a road cross with lane markings and sidewalks, a parking lot, buildings
//! (one with a vegetated courtyard), trees, vehicles and paved patches.
//! Deterministic for a given seed.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::LabelMap;
use crate::taxonomy::Taxonomy;

/// Class names the generator paints with.
pub const REQUIRED_CLASSES: [&str; 14] = [
    "low vegetation",
    "paved road",
    "non-paved road",
    "paved parking place",
    "sidewalk",
    "lane marking",
    "building",
    "car",
    "van",
    "truck",
    "bus",
    "impervious surface",
    "tree",
    "trailer",
];

struct Ids {
    grass: u8,
    road: u8,
    dirt_road: u8,
    parking: u8,
    sidewalk: u8,
    marking: u8,
    building: u8,
    car: u8,
    van: u8,
    truck: u8,
    bus: u8,
    paved: u8,
    tree: u8,
    trailer: u8,
}

fn ids(tax: &Taxonomy) -> Result<Ids, String> {
    let id = |n: &str| tax.class_id(n).ok_or_else(|| format!("taxonomy lacks class {n:?}"));
    Ok(Ids {
        grass: id("low vegetation")?,
        road: id("paved road")?,
        dirt_road: id("non-paved road")?,
        parking: id("paved parking place")?,
        sidewalk: id("sidewalk")?,
        marking: id("lane marking")?,
        building: id("building")?,
        car: id("car")?,
        van: id("van")?,
        truck: id("truck")?,
        bus: id("bus")?,
        paved: id("impervious surface")?,
        tree: id("tree")?,
        trailer: id("trailer")?,
    })
}

struct Canvas {
    map: LabelMap,
}

impl Canvas {
    fn rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, class: u8) {
        let (mw, mh) = (self.map.width() as i64, self.map.height() as i64);
        for y in y0.max(0)..(y0 + h).min(mh) {
            for x in x0.max(0)..(x0 + w).min(mw) {
                self.map.set(x as usize, y as usize, class);
            }
        }
    }

    fn disk(&mut self, cx: i64, cy: i64, r: i64, class: u8) {
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                let inside = (x - cx).pow(2) + (y - cy).pow(2) <= r * r;
                if inside && x >= 0 && y >= 0 && (x as usize) < self.map.width() && (y as usize) < self.map.height() {
                    self.map.set(x as usize, y as usize, class);
                }
            }
        }
    }

    fn get(&self, x: i64, y: i64) -> Option<u8> {
        (x >= 0 && y >= 0 && (x as usize) < self.map.width() && (y as usize) < self.map.height())
            .then(|| self.map.get(x as usize, y as usize))
    }

    fn area_is(&self, x0: i64, y0: i64, w: i64, h: i64, class: u8) -> bool {
        (y0..y0 + h).all(|y| (x0..x0 + w).all(|x| self.get(x, y) == Some(class)))
    }
}

/// A `side × side` scene; `side` must be at least 32.
pub fn synth_scene(tax: &Taxonomy, side: usize, seed: u64) -> Result<LabelMap, String> {
    if side < 32 {
        return Err(format!("scene side {side} is below the minimum of 32"));
    }
    let c = ids(tax)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cv = Canvas {
        map: LabelMap::filled(side, side, c.grass).expect("positive side"),
    };
    let s = side as i64;
    let unit = (s / 32).max(1);

    // Road cross.
    let road_w = 4 * unit;
    let ry = rng.random_range(s / 4..3 * s / 4 - road_w);
    let rx = rng.random_range(s / 4..3 * s / 4 - road_w);
    let vertical_class = if rng.random_bool(0.3) { c.dirt_road } else { c.road };
    cv.rect(0, ry - unit, s, unit, c.sidewalk);
    cv.rect(0, ry + road_w, s, unit, c.sidewalk);
    cv.rect(rx - unit, 0, unit, s, c.sidewalk);
    cv.rect(rx + road_w, 0, unit, s, c.sidewalk);
    cv.rect(0, ry, s, road_w, c.road);
    cv.rect(rx, 0, road_w, s, vertical_class);
    let mid = ry + road_w / 2;
    let mut x = 0;
    while x < s {
        if !(rx - unit..rx + road_w + unit).contains(&x) {
            cv.rect(x, mid, (2 * unit).max(2), (unit / 2).max(1), c.marking);
        }
        x += 4 * unit;
    }

    // Quadrants around the cross: (x0, y0, w, h).
    let quads = [
        (0, 0, rx - unit, ry - unit),
        (rx + road_w + unit, 0, s - rx - road_w - unit, ry - unit),
        (0, ry + road_w + unit, rx - unit, s - ry - road_w - unit),
        (rx + road_w + unit, ry + road_w + unit, s - rx - road_w - unit, s - ry - road_w - unit),
    ];
    let parking_quad = rng.random_range(0..4);
    for (qi, &(qx, qy, qw, qh)) in quads.iter().enumerate() {
        if qw < 6 * unit || qh < 6 * unit {
            continue;
        }
        if qi == parking_quad {
            // Parking lot touching the road side of the quadrant, cars in a row.
            let pw = qw * 2 / 3;
            let ph = (qh / 2).max(3 * unit);
            let px = if qx == 0 { qx + qw - pw } else { qx };
            let py = if qy == 0 { qy + qh - ph } else { qy };
            cv.rect(px, py, pw, ph, c.parking);
            let mut cx = px + unit;
            while cx + 2 * unit <= px + pw - unit {
                if rng.random_bool(0.6) {
                    let class = if rng.random_bool(0.8) { c.car } else { c.van };
                    cv.rect(cx, py + unit, unit.max(2), (2 * unit).max(3), class);
                }
                cx += 2 * unit;
            }
            // Building beside the lot.
            let bx = if px == qx { px + pw + unit } else { qx + unit };
            let bw = qw - pw - 2 * unit;
            if bw >= 3 * unit {
                cv.rect(bx, qy + unit, bw, qh - 2 * unit, c.building);
            }
        } else if rng.random_bool(0.5) {
            // Courtyard building.
            let bw = qw * 3 / 4;
            let bh = qh * 3 / 4;
            let bx = qx + (qw - bw) / 2;
            let by = qy + (qh - bh) / 2;
            cv.rect(bx, by, bw, bh, c.building);
            let t = (2 * unit).max(2);
            if bw > 2 * t + 2 && bh > 2 * t + 2 {
                let court = if rng.random_bool(0.5) { c.grass } else { c.paved };
                cv.rect(bx + t, by + t, bw - 2 * t, bh - 2 * t, court);
            }
        } else {
            // A few detached buildings and a paved patch.
            for _ in 0..rng.random_range(1..=3) {
                let bw = rng.random_range(2 * unit..=(qw / 2).max(2 * unit));
                let bh = rng.random_range(2 * unit..=(qh / 2).max(2 * unit));
                let bx = qx + rng.random_range(0..=(qw - bw).max(0));
                let by = qy + rng.random_range(0..=(qh - bh).max(0));
                cv.rect(bx, by, bw, bh, c.building);
            }
            let pw = (qw / 4).max(2);
            let ph = (qh / 4).max(2);
            let (px, py) = (qx + rng.random_range(0..=qw - pw), qy + rng.random_range(0..=qh - ph));
            if cv.area_is(px, py, pw, ph, c.grass) {
                cv.rect(px, py, pw, ph, c.paved);
            }
        }
    }

    // Trees on grass near the roads.
    for _ in 0..rng.random_range(3..8) {
        let along_horizontal = rng.random_bool(0.5);
        let r = rng.random_range(unit..=2 * unit);
        let (tx, ty) = if along_horizontal {
            let side_off = if rng.random_bool(0.5) { -2 * unit - r } else { road_w + 2 * unit + r };
            (rng.random_range(0..s), ry + side_off)
        } else {
            let side_off = if rng.random_bool(0.5) { -2 * unit - r } else { road_w + 2 * unit + r };
            (rx + side_off, rng.random_range(0..s))
        };
        if cv.get(tx, ty) == Some(c.grass) {
            cv.disk(tx, ty, r, c.tree);
        }
    }

    // Vehicles driving on the roads.
    let vehicles = [c.car, c.car, c.car, c.van, c.truck, c.bus, c.trailer];
    for _ in 0..rng.random_range(2..7) {
        let class = vehicles[rng.random_range(0..vehicles.len())];
        let long = if class == c.bus || class == c.truck { 3 * unit } else { (3 * unit / 2).max(2) };
        if rng.random_bool(0.5) {
            let vx = rng.random_range(0..s - long);
            let lane = if rng.random_bool(0.5) { ry + unit / 2 } else { ry + road_w / 2 + unit / 2 + 1 };
            cv.rect(vx, lane, long, unit.max(1), class);
        } else {
            let vy = rng.random_range(0..s - long);
            let lane = if rng.random_bool(0.5) { rx + unit / 2 } else { rx + road_w / 2 + 1 };
            cv.rect(lane, vy, unit.max(1), long, class);
        }
    }
    Ok(cv.map)
}

/// Colour rendering of a label map with a little seeded texture, used as
/// stand-in imagery for synthetic scenes.
pub fn render_palette(map: &LabelMap, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut img = RgbImage::new(map.width() as u32, map.height() as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let [r, g, b] = palette(map.get(x as usize, y as usize));
        let n: i16 = rng.random_range(-12..=12);
        let j = |v: u8| (v as i16 + n).clamp(0, 255) as u8;
        *px = Rgb([j(r), j(g), j(b)]);
    }
    img
}

fn palette(id: u8) -> [u8; 3] {
    const COLORS: [[u8; 3]; 20] = [
        [96, 140, 70],   // low vegetation
        [90, 90, 95],    // paved road
        [140, 115, 85],  // non-paved road
        [120, 120, 128], // paved parking
        [150, 130, 100], // non-paved parking
        [170, 90, 90],   // bikeway
        [180, 180, 170], // sidewalk
        [200, 160, 60],  // entrance/exit
        [220, 60, 60],   // danger area
        [245, 245, 245], // lane marking
        [160, 70, 50],   // building
        [30, 60, 200],   // car
        [200, 200, 40],  // trailer
        [40, 170, 200],  // van
        [200, 100, 20],  // truck
        [140, 40, 160],  // large truck
        [230, 130, 170], // bus
        [110, 100, 90],  // clutter
        [165, 160, 150], // impervious surface
        [30, 95, 40],    // tree
    ];
    COLORS.get(id as usize).copied().unwrap_or([id, id.wrapping_mul(7), id.wrapping_mul(13)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprgen::Expression;
    use crate::maskgen::{generate_mask, SpatialPredicateConfig};

    #[test]
    fn deterministic_and_valid() {
        let tax = Taxonomy::refsegrs();
        let a = synth_scene(&tax, 64, 9).unwrap();
        assert_eq!(a, synth_scene(&tax, 64, 9).unwrap());
        assert_ne!(a, synth_scene(&tax, 64, 10).unwrap());
        a.validate(&tax).unwrap();
        assert!(synth_scene(&tax, 16, 0).is_err());
    }

    #[test]
    fn scenes_support_relations() {
        let tax = Taxonomy::refsegrs();
        let cfg = SpatialPredicateConfig::default();
        let mut hits = 0;
        for seed in 0..10 {
            let map = synth_scene(&tax, 128, seed).unwrap();
            let e = Expression::build(&tax, "car", None, Some("in the parking area")).unwrap();
            hits += !generate_mask(&map, &tax, &e, &cfg).unwrap().is_empty() as usize;
        }
        assert!(hits >= 5, "only {hits} scenes had parked cars");
    }

    #[test]
    fn palette_image_matches_dims() {
        let tax = Taxonomy::refsegrs();
        let map = synth_scene(&tax, 48, 1).unwrap();
        let img = render_palette(&map, 1);
        assert_eq!((img.width(), img.height()), (48, 48));
    }
}
