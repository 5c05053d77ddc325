//! Deterministic test doubles. Every mock is a pure function of its inputs
//! and seed, so repeated calls agree bit for bit.

use std::collections::HashSet;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::fixtures::{self, FixtureScene};
use super::{
    AugmenterBackend, BackendError, InpainterBackend, MatcherBackend, SegmenterBackend, TaggerBackend, Tagging,
};
use crate::mask::{Bitmap, SegmentMask};
use crate::model::{Embedding, ObjectTag};
use crate::pipeline::prompt;
use crate::raster::{content_hash, derive_seed};

const VOCABULARY: &[&str] = &[
    "person", "tree", "car", "dog", "cat", "chair", "table", "cup", "boat", "bench", "flower", "clock", "umbrella",
    "bicycle", "window", "road", "cloud", "lamp", "book", "bottle",
];

pub struct MockTagger {
    seed: u64,
}

impl MockTagger {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl TaggerBackend for MockTagger {
    fn tag(&self, image: &RgbImage) -> Result<Tagging, BackendError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(BackendError::EmptyInput { backend: "mock-tagger" });
        }
        if let Some(scene) = fixtures::lookup(image) {
            return Ok(Tagging {
                tags: scene.tags.iter().map(|t| ObjectTag::detected(t)).collect(),
                caption: scene.generated_caption.to_string(),
            }
            .dedup());
        }
        let hash = content_hash(image);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"tagger", &self.seed.to_le_bytes(), hash.as_bytes()]));
        let n = rng.random_range(2..=4);
        let picked: Vec<&str> = VOCABULARY.choose_multiple(&mut rng, n).copied().collect();
        let caption = match picked.as_slice() {
            [a, b] => format!("a photo of a {a} and a {b}"),
            [head @ .., last] => {
                let listed: Vec<String> = head.iter().map(|t| format!("a {t}")).collect();
                format!("a photo of {} and a {last}", listed.join(", "))
            }
            [] => unreachable!(),
        };
        Ok(Tagging {
            tags: picked.iter().map(|t| ObjectTag::detected(t)).collect(),
            caption,
        }
        .dedup())
    }
}

/// Fixture objects segment to their visible region; tags unknown to a
/// fixture segment to nothing. Other images get a seeded rectangle.
pub struct MockSegmenter {
    seed: u64,
    empty_labels: HashSet<String>,
}

impl MockSegmenter {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            empty_labels: HashSet::new(),
        }
    }

    /// Force empty masks for these labels.
    pub fn with_empty_labels<I: IntoIterator<Item = S>, S: Into<String>>(mut self, labels: I) -> Self {
        self.empty_labels.extend(labels.into_iter().map(Into::into));
        self
    }
}

impl SegmenterBackend for MockSegmenter {
    fn segment(&self, image_id: &str, image: &RgbImage, tag: &ObjectTag) -> Result<SegmentMask, BackendError> {
        let (w, h) = image.dimensions();
        if self.empty_labels.contains(&tag.label) {
            return Ok(SegmentMask::new(image_id, tag.clone(), Bitmap::empty(w, h)));
        }
        if let Some(scene) = fixtures::lookup(image) {
            return Ok(SegmentMask::new(image_id, tag.clone(), scene.object_mask(&tag.label)));
        }
        let hash = content_hash(image);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            b"segmenter",
            &self.seed.to_le_bytes(),
            hash.as_bytes(),
            tag.label.as_bytes(),
        ]));
        let rw = ((w as f64) * rng.random_range(0.3..0.7)).ceil() as u32;
        let rh = ((h as f64) * rng.random_range(0.3..0.7)).ceil() as u32;
        let x0 = rng.random_range(0..=w - rw.min(w));
        let y0 = rng.random_range(0..=h - rh.min(h));
        let bitmap = Bitmap::from_fn(w, h, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh);
        Ok(SegmentMask::new(image_id, tag.clone(), bitmap))
    }
}

/// (keyword, portrayal) alternatives per object label.
fn concept_table(label: &str) -> &'static [(&'static str, &'static str)] {
    match label {
        "seagull" | "bird" => &[
            ("bald eagle", "a black and white bald eagle"),
            ("white pelican", "a large white pelican with an orange beak"),
            ("black crow", "a glossy black crow with spread wings"),
            ("blue parrot", "a bright blue parrot with long tail feathers"),
            ("snowy owl", "a snowy owl with golden eyes"),
        ],
        "water" | "sea" => &[
            ("mountain lake", "a serene mountain lake with crystal clear water"),
            ("frozen river", "a frozen river covered in cracked blue ice"),
            ("tropical lagoon", "a turquoise tropical lagoon with gentle ripples"),
            ("stormy sea", "a stormy grey sea with white-capped waves"),
        ],
        "city" => &[
            ("historic town", "a historic town with red tiled roofs and a church tower"),
            ("futuristic skyline", "a futuristic skyline of glass towers at dusk"),
            ("fishing village", "a small fishing village with colorful wooden houses"),
            ("desert fortress", "an ancient sandstone desert fortress"),
        ],
        "ship" | "boat" => &[
            ("pirate ship", "an old wooden pirate ship with black sails"),
            ("cruise liner", "a huge white cruise liner with many decks"),
            ("red tugboat", "a small red tugboat with a tall chimney"),
            ("sailing yacht", "a sleek sailing yacht with white sails"),
        ],
        "rock" => &[
            ("volcanic rock", "a jagged black volcanic rock"),
            ("rock tower", "a tall tower of stacked smooth rocks"),
            ("mossy boulder", "a round boulder covered in green moss"),
            ("coral reef", "a colorful coral reef outcrop"),
        ],
        "bread" => &[
            ("freshly baked loaf", "a freshly baked loaf with a golden crust"),
            ("croissant", "a flaky buttery croissant"),
            ("rye bread", "a dark rye bread sprinkled with seeds"),
            ("baguette", "a long french baguette with a crisp crust"),
        ],
        "house" | "building" => &[
            ("victorian house", "a victorian house with a wooden entrance"),
            ("log cabin", "a rustic log cabin with a stone chimney"),
            ("glass office", "a modern glass office with mirrored windows"),
            ("thatched cottage", "a thatched cottage with white walls"),
        ],
        "sky" => &[
            ("rocky mountains", "rocky mountains with snowy peaks"),
            ("sunset sky", "a vivid orange and purple sunset sky"),
            ("starry night", "a starry night sky with the milky way"),
            ("storm clouds", "dark towering storm clouds"),
        ],
        "dog" => &[
            ("golden retriever", "a fluffy golden retriever with a red collar"),
            ("black poodle", "a curly black poodle"),
            ("dalmatian", "a spotted dalmatian puppy"),
            ("husky", "a grey and white siberian husky with blue eyes"),
        ],
        "cat" => &[
            ("tabby cat", "an orange tabby cat with green eyes"),
            ("siamese cat", "a cream siamese cat with dark ears"),
            ("black kitten", "a small black kitten"),
            ("persian cat", "a long haired white persian cat"),
        ],
        "pizza" => &[
            ("pepperoni pizza", "a pepperoni pizza with melted cheese"),
            ("margherita pizza", "a margherita pizza with fresh basil leaves"),
            ("chocolate cake", "a round chocolate cake with cream frosting"),
            ("quiche", "a golden vegetable quiche"),
        ],
        "car" => &[
            ("yellow taxi", "a yellow taxi cab with a roof sign"),
            ("vintage convertible", "a vintage red convertible with chrome bumpers"),
            ("police car", "a black and white police car"),
            ("pickup truck", "a muddy green pickup truck"),
        ],
        "horse" => &[
            ("zebra", "a striped zebra grazing"),
            ("white stallion", "a white stallion with a flowing mane"),
            ("brown donkey", "a small brown donkey"),
            ("camel", "a tall camel with two humps"),
        ],
        _ => &[],
    }
}

const ADJECTIVES: &[&str] = &[
    "weathered", "golden", "tiny", "ancient", "striped", "glowing", "rustic", "modern", "painted", "frosted",
];
const DETAILS: &[&str] = &[
    "in soft morning light",
    "covered in green moss",
    "with intricate carved patterns",
    "with a glossy finish",
    "dusted with fresh snow",
    "in bright neon colors",
];

/// Answers concept-augmentation prompts with "keyword: portrayal" lines,
/// using a lookup table for known objects and seeded synthesis otherwise.
pub struct MockAugmenter {
    seed: u64,
}

impl MockAugmenter {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl AugmenterBackend for MockAugmenter {
    fn complete(&self, prompt_text: &str) -> Result<String, BackendError> {
        if prompt_text.trim().is_empty() {
            return Err(BackendError::EmptyInput { backend: "mock-augmenter" });
        }
        let query = prompt::parse_query(prompt_text)
            .ok_or_else(|| BackendError::failed("mock-augmenter", "prompt has no query object"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            b"augmenter",
            &self.seed.to_le_bytes(),
            prompt_text.as_bytes(),
        ]));
        let table = concept_table(&query.object);
        let offset = if table.is_empty() { 0 } else { rng.random_range(0..table.len()) };
        let mut lines = vec![format!("Here are {} variations:", query.count)];
        for i in 0..query.count {
            let (keyword, portrayal) = if i < table.len() {
                let (k, p) = table[(offset + i) % table.len()];
                (k.to_string(), p.to_string())
            } else {
                let adj = ADJECTIVES.choose(&mut rng).copied().unwrap_or("new");
                let detail = DETAILS.choose(&mut rng).copied().unwrap_or("");
                (
                    format!("{adj} {}", query.object),
                    format!("a {adj} {} {detail}", query.object),
                )
            };
            lines.push(format!("{}. {keyword}: {portrayal}", i + 1));
        }
        Ok(lines.join("\n"))
    }
}

/// Keeps pixels outside the mask and fills the masked region with a pattern
/// seeded by (portrayal, seed).
pub struct MockInpainter;

impl InpainterBackend for MockInpainter {
    fn inpaint(&self, image: &RgbImage, mask: &SegmentMask, portrayal: &str, seed: u64) -> Result<RgbImage, BackendError> {
        if mask.bitmap.dimensions() != image.dimensions() {
            return Err(BackendError::Dimensions {
                backend: "mock-inpainter",
                message: format!("mask {:?} vs image {:?}", mask.bitmap.dimensions(), image.dimensions()),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"inpaint", portrayal.as_bytes(), &seed.to_le_bytes()]));
        let base: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let mut out = image.clone();
        for (x, y, px) in out.enumerate_pixels_mut() {
            if mask.bitmap.get(x, y) {
                let jitter: [i16; 3] = [
                    rng.random_range(-40..=40),
                    rng.random_range(-40..=40),
                    rng.random_range(-40..=40),
                ];
                *px = Rgb([0, 1, 2].map(|c| (base[c] as i16 + jitter[c]).clamp(0, 255) as u8));
            }
        }
        Ok(out)
    }
}

/// Bag-of-words text embeddings and pixel-overlap image embeddings.
///
/// A registered image embeds near its caption; an unregistered image embeds
/// as a mixture of the registered images it shares pixels with plus hash
/// noise, so an inpainted fixture stays close to its source caption.
pub struct MockMatcher {
    dim: usize,
    seed: u64,
    registry: Vec<(RgbImage, Vec<f64>)>,
}

const ITM_SCALE: f64 = 10.0;
const ITM_OFFSET: f64 = 0.5;

impl MockMatcher {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            registry: Vec::new(),
        }
    }

    /// Matcher with every fixture scene registered under its human caption.
    pub fn with_fixtures(dim: usize, seed: u64) -> Self {
        let mut m = Self::new(dim, seed);
        for scene in fixtures::all_scenes() {
            m.register_scene(&scene);
        }
        m
    }

    fn register_scene(&mut self, scene: &FixtureScene) {
        self.register(scene.render(), scene.caption);
    }

    pub fn register(&mut self, image: RgbImage, caption: &str) {
        let e = self.text_vector(caption);
        self.registry.push((image, e));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn gaussian(&self, parts: &[&[u8]]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(parts));
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn text_vector(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for word in tokens(text) {
            let g = self.gaussian(&[b"word", &self.seed.to_le_bytes(), word.as_bytes()]);
            acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
        }
        normalize(acc)
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn pixel_overlap(a: &RgbImage, b: &RgbImage) -> f64 {
    if a.dimensions() != b.dimensions() {
        return 0.0;
    }
    let same = a.pixels().zip(b.pixels()).filter(|(p, q)| p == q).count();
    same as f64 / (a.width() as f64 * a.height() as f64)
}

impl MatcherBackend for MockMatcher {
    fn itm_score(&self, image: &RgbImage, text: &str) -> Result<f64, BackendError> {
        let ei = self.embed_image(image)?;
        let et = self.embed_text(text)?;
        Ok(ITM_SCALE * (crate::model::dot(&ei.0, &et.0) - ITM_OFFSET))
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Embedding, BackendError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(BackendError::EmptyInput { backend: "mock-matcher" });
        }
        let hash = content_hash(image);
        let mut acc = vec![0.0; self.dim];
        let mut best = 0.0f64;
        for (img, e) in &self.registry {
            let overlap = pixel_overlap(img, image);
            if overlap >= 0.5 {
                let w = overlap * overlap;
                acc.iter_mut().zip(e).for_each(|(a, v)| *a += w * v);
                best = best.max(overlap);
            }
        }
        let noise = normalize(self.gaussian(&[b"image", &self.seed.to_le_bytes(), hash.as_bytes()]));
        let noise_weight = 0.35 + (1.0 - best);
        acc.iter_mut().zip(&noise).for_each(|(a, v)| *a += noise_weight * v);
        Ok(Embedding(normalize(acc)))
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, BackendError> {
        if tokens(text).next().is_none() {
            return Err(BackendError::EmptyInput { backend: "mock-matcher" });
        }
        Ok(Embedding(self.text_vector(text)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seagull_fixture_tags() {
        let scene = fixtures::scene("seagull_ship").unwrap();
        let t = MockTagger::new(0).tag(&scene.render()).unwrap();
        let labels: Vec<_> = t.tags.iter().map(|t| t.label.as_str()).collect();
        assert_eq!(labels, ["seagull", "water", "ship", "city"]);
        assert_eq!(
            t.caption,
            "a seagull in the ocean near a harbor with a ship and a city in the background"
        );
    }

    #[test]
    fn tagger_is_deterministic() {
        let img = fixtures::scene("bird_rock").unwrap().render();
        let tagger = MockTagger::new(3);
        assert_eq!(tagger.tag(&img).unwrap(), tagger.tag(&img).unwrap());
    }

    #[test]
    fn blank_image_seed_7_golden() {
        let blank = RgbImage::new(32, 32);
        let t = MockTagger::new(7).tag(&blank).unwrap();
        let labels: Vec<_> = t.tags.iter().map(|t| t.label.clone()).collect();
        assert_eq!(labels, GOLDEN_BLANK_SEED7);
        assert_eq!(MockTagger::new(7).tag(&blank).unwrap(), t);
    }

    const GOLDEN_BLANK_SEED7: &[&str] = &["clock", "dog", "person", "cloud"];

    #[test]
    fn inpainter_respects_mask() {
        let img = fixtures::scene("seagull_ship").unwrap().render();
        let tag = ObjectTag::detected("x");
        let empty = SegmentMask::new("i", tag.clone(), Bitmap::empty(img.width(), img.height()));
        assert_eq!(MockInpainter.inpaint(&img, &empty, "a red fox", 1).unwrap(), img);
        let full = SegmentMask::new("i", tag, Bitmap::filled(img.width(), img.height(), true));
        let a = MockInpainter.inpaint(&img, &full, "a red fox", 1).unwrap();
        let b = MockInpainter.inpaint(&img, &full, "a blue whale", 1).unwrap();
        assert!(a.pixels().zip(b.pixels()).any(|(p, q)| p != q));
        assert_eq!(a, MockInpainter.inpaint(&img, &full, "a red fox", 1).unwrap());
    }

    #[test]
    fn inpainter_rejects_dimension_mismatch() {
        let img = RgbImage::new(4, 4);
        let mask = SegmentMask::new("i", ObjectTag::detected("x"), Bitmap::empty(4, 5));
        assert!(matches!(
            MockInpainter.inpaint(&img, &mask, "p", 0),
            Err(BackendError::Dimensions { .. })
        ));
    }

    #[test]
    fn embeddings_are_unit_norm_and_stable() {
        let m = MockMatcher::with_fixtures(64, 7);
        for text in ["a dog", "bald eagle", "x"] {
            let e = m.embed_text(text).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6);
            assert_eq!(e, m.embed_text(text).unwrap());
        }
        let img = RgbImage::from_pixel(5, 5, Rgb([1, 2, 3]));
        let e = m.embed_image(&img).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e, m.embed_image(&img).unwrap());
        assert!(m.embed_text("  ").is_err());
    }

    #[test]
    fn fixture_pairs_rank_their_own_caption_first() {
        let m = MockMatcher::with_fixtures(64, 7);
        let scenes = fixtures::all_scenes();
        let texts: Vec<_> = scenes.iter().map(|s| m.embed_text(s.caption).unwrap()).collect();
        let images: Vec<_> = scenes.iter().map(|s| m.embed_image(&s.render()).unwrap()).collect();
        for (i, t) in texts.iter().enumerate() {
            let own = t.cosine(&images[i]).unwrap();
            for (j, img) in images.iter().enumerate() {
                if i != j {
                    assert!(own > t.cosine(img).unwrap(), "caption {i} vs image {j}");
                }
            }
        }
    }

    #[test]
    fn augmenter_answers_query() {
        let p = prompt::PromptTemplate::default_template()
            .render("a seagull flying over the water", &ObjectTag::detected("seagull"), 4, 3)
            .unwrap();
        let out = MockAugmenter::new(1).complete(&p).unwrap();
        assert_eq!(out.lines().count(), 5);
        assert_eq!(out, MockAugmenter::new(1).complete(&p).unwrap());
    }
}
