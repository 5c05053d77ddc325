//! Procedurally rendered fixture scenes. Each scene knows its human caption,
//! the tagger's scene caption, its tags and the pixel region of every object,
//! so the mocks can answer deterministically.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use image::{Rgb, RgbImage};

use crate::mask::Bitmap;
use crate::model::{ImageRef, SourcePair, Split};
use crate::raster::{self, RasterError};

pub const FIXTURE_WIDTH: u32 = 64;
pub const FIXTURE_HEIGHT: u32 = 48;

#[derive(Debug, Clone, Copy)]
pub enum Shape {
    /// Half-open pixel box `[x0, x1) x [y0, y1)`.
    Rect { x0: u32, y0: u32, x1: u32, y1: u32 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: u32, y: u32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureObject {
    pub label: &'static str,
    pub shape: Shape,
    pub color: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct FixtureScene {
    pub name: &'static str,
    pub caption: &'static str,
    pub generated_caption: &'static str,
    /// Tags the mock tagger reports, in order. A tag without an object region
    /// segments to an empty mask.
    pub tags: Vec<&'static str>,
    pub background: [u8; 3],
    /// Drawn in order; later objects occlude earlier ones.
    pub objects: Vec<FixtureObject>,
}

fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> Shape {
    Shape::Rect { x0, y0, x1, y1 }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Shape {
    Shape::Ellipse { cx, cy, rx, ry }
}

fn obj(label: &'static str, shape: Shape, color: [u8; 3]) -> FixtureObject {
    FixtureObject { label, shape, color }
}

fn texture(x: u32, y: u32, salt: u32) -> i16 {
    ((x.wrapping_mul(7) + y.wrapping_mul(13) + salt.wrapping_mul(31)) % 9) as i16 - 4
}

fn shade(c: [u8; 3], t: i16) -> Rgb<u8> {
    Rgb(c.map(|v| (v as i16 + t).clamp(0, 255) as u8))
}

impl FixtureScene {
    fn salt(&self) -> u32 {
        self.name.bytes().fold(0u32, |a, b| a.wrapping_mul(33).wrapping_add(b as u32))
    }

    /// Index of the topmost object at each pixel, if any.
    fn owner_map(&self) -> Vec<Option<usize>> {
        let mut owners = vec![None; (FIXTURE_WIDTH * FIXTURE_HEIGHT) as usize];
        for (i, o) in self.objects.iter().enumerate() {
            for y in 0..FIXTURE_HEIGHT {
                for x in 0..FIXTURE_WIDTH {
                    if o.shape.contains(x, y) {
                        owners[(y * FIXTURE_WIDTH + x) as usize] = Some(i);
                    }
                }
            }
        }
        owners
    }

    pub fn render(&self) -> RgbImage {
        let owners = self.owner_map();
        let salt = self.salt();
        RgbImage::from_fn(FIXTURE_WIDTH, FIXTURE_HEIGHT, |x, y| {
            match owners[(y * FIXTURE_WIDTH + x) as usize] {
                Some(i) => shade(self.objects[i].color, texture(x, y, salt + i as u32 + 1)),
                None => shade(self.background, texture(x, y, salt)),
            }
        })
    }

    /// Visible region of `label`; empty when the scene has no such object.
    pub fn object_mask(&self, label: &str) -> Bitmap {
        let owners = self.owner_map();
        let idx: Vec<usize> = self
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.label == label)
            .map(|(i, _)| i)
            .collect();
        Bitmap::from_fn(FIXTURE_WIDTH, FIXTURE_HEIGHT, |x, y| {
            owners[(y * FIXTURE_WIDTH + x) as usize].is_some_and(|o| idx.contains(&o))
        })
    }

    pub fn source_pair(&self, image_path: &Path) -> SourcePair {
        SourcePair {
            id: self.name.to_string(),
            image: ImageRef {
                id: self.name.to_string(),
                path: image_path.to_path_buf(),
                width: FIXTURE_WIDTH,
                height: FIXTURE_HEIGHT,
            },
            caption: self.caption.to_string(),
            generated_caption: None,
            split: Split::Train,
        }
    }
}

/// The ten-scene fixture corpus.
pub fn corpus() -> Vec<FixtureScene> {
    const SKY: [u8; 3] = [150, 200, 235];
    vec![
        FixtureScene {
            name: "seagull_ship",
            caption: "a seagull flying over the water near a large ship",
            generated_caption: "a seagull in the ocean near a harbor with a ship and a city in the background",
            tags: vec!["seagull", "water", "ship", "city"],
            background: SKY,
            objects: vec![
                obj("city", rect(0, 6, 64, 20), [120, 120, 130]),
                obj("water", rect(0, 24, 64, 48), [30, 80, 160]),
                obj("ship", rect(26, 16, 58, 34), [60, 40, 30]),
                obj("seagull", ellipse(14.0, 12.0, 8.0, 5.0), [245, 245, 245]),
            ],
        },
        FixtureScene {
            name: "bird_rock",
            caption: "a bird perched on a rock by the sea",
            generated_caption: "a bird standing on a large rock near the sea",
            tags: vec!["bird", "rock", "sea"],
            background: SKY,
            objects: vec![
                obj("sea", rect(0, 28, 64, 48), [20, 90, 150]),
                obj("rock", ellipse(32.0, 36.0, 20.0, 12.0), [110, 100, 90]),
                obj("bird", ellipse(32.0, 20.0, 7.0, 6.0), [230, 230, 220]),
            ],
        },
        FixtureScene {
            name: "bread_table",
            caption: "a loaf of bread on a wooden table next to a knife",
            generated_caption: "a bread and a knife on a table",
            tags: vec!["bread", "table", "knife"],
            background: [210, 200, 190],
            objects: vec![
                obj("table", rect(0, 20, 64, 48), [140, 90, 50]),
                obj("bread", ellipse(26.0, 28.0, 16.0, 9.0), [200, 150, 80]),
                obj("knife", rect(46, 26, 60, 29), [190, 190, 200]),
            ],
        },
        FixtureScene {
            name: "house_sky",
            caption: "a house with a red door under a blue sky",
            generated_caption: "a house and a tree under the sky",
            tags: vec!["house", "sky", "tree", "door"],
            background: [90, 140, 60],
            objects: vec![
                obj("sky", rect(0, 0, 64, 22), SKY),
                obj("house", rect(10, 12, 42, 44), [220, 210, 180]),
                obj("tree", ellipse(52.0, 24.0, 8.0, 14.0), [40, 110, 40]),
                obj("door", rect(22, 30, 30, 44), [180, 30, 30]),
            ],
        },
        FixtureScene {
            name: "dog_grass",
            caption: "a dog running across the grass with a ball",
            generated_caption: "a dog playing with a ball on the grass in a park",
            tags: vec!["dog", "grass", "ball", "park"],
            background: SKY,
            objects: vec![
                obj("grass", rect(0, 18, 64, 48), [70, 150, 60]),
                obj("dog", ellipse(24.0, 30.0, 13.0, 8.0), [150, 100, 50]),
                obj("ball", ellipse(50.0, 36.0, 3.5, 3.5), [230, 60, 40]),
            ],
        },
        FixtureScene {
            name: "cat_sofa",
            caption: "a cat sleeping on a sofa beside a lamp",
            generated_caption: "a cat lying on a couch in a living room with a lamp",
            tags: vec!["cat", "sofa", "lamp", "pillow"],
            background: [230, 220, 200],
            objects: vec![
                obj("sofa", rect(4, 20, 48, 44), [90, 60, 110]),
                obj("cat", ellipse(24.0, 22.0, 10.0, 6.0), [80, 80, 80]),
                obj("lamp", rect(54, 8, 60, 40), [240, 220, 120]),
            ],
        },
        FixtureScene {
            name: "pizza_plate",
            caption: "a pizza on a plate next to a glass of wine",
            generated_caption: "a pizza and a glass on a table",
            tags: vec!["pizza", "plate", "glass", "table"],
            background: [120, 80, 50],
            objects: vec![
                obj("plate", ellipse(26.0, 24.0, 20.0, 17.0), [240, 240, 240]),
                obj("pizza", ellipse(26.0, 24.0, 15.0, 12.0), [220, 160, 60]),
                obj("glass", rect(52, 10, 60, 34), [160, 20, 60]),
            ],
        },
        FixtureScene {
            name: "car_street",
            caption: "a car parked on the street in front of a building",
            generated_caption: "a car on a street with a building and a tree",
            tags: vec!["car", "street", "building", "tree"],
            background: SKY,
            objects: vec![
                obj("building", rect(4, 2, 40, 30), [170, 150, 140]),
                obj("street", rect(0, 30, 64, 48), [70, 70, 75]),
                obj("car", rect(14, 28, 44, 40), [200, 30, 30]),
                obj("tree", ellipse(54.0, 18.0, 7.0, 12.0), [40, 120, 50]),
            ],
        },
        FixtureScene {
            name: "plates_table",
            caption: "a plate of food and a plate of fruit on a table",
            generated_caption: "two plates on a table",
            tags: vec!["plate", "table", "food"],
            background: [200, 200, 210],
            objects: vec![
                obj("table", rect(0, 12, 64, 48), [150, 100, 60]),
                obj("plate", ellipse(18.0, 28.0, 12.0, 10.0), [245, 245, 240]),
                obj("plate", ellipse(46.0, 28.0, 12.0, 10.0), [245, 245, 240]),
                obj("food", ellipse(18.0, 28.0, 7.0, 6.0), [160, 80, 40]),
            ],
        },
        FixtureScene {
            name: "horse_field",
            caption: "a horse standing in a field near a fence",
            generated_caption: "a horse in a field with a fence and mountains",
            tags: vec!["horse", "field", "fence", "mountain"],
            background: SKY,
            objects: vec![
                obj("mountain", ellipse(40.0, 22.0, 30.0, 12.0), [110, 110, 140]),
                obj("field", rect(0, 22, 64, 48), [120, 170, 70]),
                obj("fence", rect(0, 24, 64, 28), [180, 160, 120]),
                obj("horse", ellipse(26.0, 34.0, 12.0, 8.0), [120, 70, 40]),
            ],
        },
    ]
}

/// A scene the tagger reports no objects for.
pub fn blank_scene() -> FixtureScene {
    FixtureScene {
        name: "blank_wall",
        caption: "a plain grey wall",
        generated_caption: "a grey wall",
        tags: vec![],
        background: [128, 128, 128],
        objects: vec![],
    }
}

pub fn all_scenes() -> Vec<FixtureScene> {
    let mut v = corpus();
    v.push(blank_scene());
    v
}

/// Scenes keyed by the content hash of their rendering.
pub fn by_hash() -> &'static HashMap<String, FixtureScene> {
    static TABLE: OnceLock<HashMap<String, FixtureScene>> = OnceLock::new();
    TABLE.get_or_init(|| {
        all_scenes()
            .into_iter()
            .map(|s| (raster::content_hash(&s.render()), s))
            .collect()
    })
}

pub fn lookup(image: &RgbImage) -> Option<&'static FixtureScene> {
    by_hash().get(&raster::content_hash(image))
}

pub fn scene(name: &str) -> Option<FixtureScene> {
    all_scenes().into_iter().find(|s| s.name == name)
}

/// Render the corpus into `dir/images/` and return its source pairs, with
/// image paths relative to `dir`.
pub fn write_corpus(dir: &Path) -> Result<Vec<SourcePair>, RasterError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| RasterError::Io {
        path: images.clone(),
        source,
    })?;
    corpus()
        .iter()
        .map(|s| {
            let rel = Path::new("images").join(format!("{}.png", s.name));
            raster::save_rgb(&dir.join(&rel), &s.render())?;
            Ok(s.source_pair(&rel))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_distinct() {
        assert_eq!(by_hash().len(), all_scenes().len());
    }

    #[test]
    fn every_object_visible() {
        for s in corpus() {
            for o in &s.objects {
                assert!(!s.object_mask(o.label).is_empty(), "{} / {}", s.name, o.label);
            }
        }
    }

    #[test]
    fn seagull_scene_matches_figure() {
        let s = scene("seagull_ship").unwrap();
        assert_eq!(s.tags, vec!["seagull", "water", "ship", "city"]);
        assert_eq!(
            s.generated_caption,
            "a seagull in the ocean near a harbor with a ship and a city in the background"
        );
    }
}
