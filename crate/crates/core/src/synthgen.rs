//! A synthetic world of "minimal semantic change" pairs.
//!
//! A scene is four categorical slots (object, count, location, attribute).
//! Each modality observes the one-hot encoding of the slots through its own
//! fixed random linear projection plus Gaussian noise. Projections depend only
//! on the world seed, so every evaluation set and training stream built from
//! one [`WorldConfig`] lives in the same world.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_stream;
use crate::similarity::EmbVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    Object,
    Count,
    Location,
    Attribute,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [Aspect::Object, Aspect::Count, Aspect::Location, Aspect::Attribute];

    pub fn as_str(self) -> &'static str {
        match self {
            Aspect::Object => "object",
            Aspect::Count => "count",
            Aspect::Location => "location",
            Aspect::Attribute => "attribute",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aspect {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown aspect {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

/// Slot values. `object`, `location` and `attribute` are zero-based category
/// ids; `count` runs from 1 to `max_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticSlots {
    pub object: usize,
    pub count: usize,
    pub location: usize,
    pub attribute: usize,
}

impl SemanticSlots {
    pub fn get(&self, aspect: Aspect) -> usize {
        match aspect {
            Aspect::Object => self.object,
            Aspect::Count => self.count,
            Aspect::Location => self.location,
            Aspect::Attribute => self.attribute,
        }
    }

    fn set(&mut self, aspect: Aspect, value: usize) {
        match aspect {
            Aspect::Object => self.object = value,
            Aspect::Count => self.count = value,
            Aspect::Location => self.location = value,
            Aspect::Attribute => self.attribute = value,
        }
    }

    pub fn hamming(&self, other: &Self) -> usize {
        Aspect::ALL
            .iter()
            .filter(|&&a| self.get(a) != other.get(a))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_objects: usize,
    pub max_count: usize,
    pub n_locations: usize,
    pub n_attributes: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_objects: 8,
            max_count: 4,
            n_locations: 4,
            n_attributes: 6,
            d_img: 16,
            d_txt: 16,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn cardinality(&self, aspect: Aspect) -> usize {
        match aspect {
            Aspect::Object => self.n_objects,
            Aspect::Count => self.max_count,
            Aspect::Location => self.n_locations,
            Aspect::Attribute => self.n_attributes,
        }
    }

    /// Length of the concatenated one-hot slot code.
    pub fn code_len(&self) -> usize {
        Aspect::ALL.iter().map(|&a| self.cardinality(a)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for a in Aspect::ALL {
            if self.cardinality(a) == 0 {
                return Err(Error::InvalidParameter {
                    name: "cardinality",
                    reason: format!("{a} needs at least one value"),
                });
            }
        }
        if self.d_img < Aspect::ALL.len() || self.d_txt < Aspect::ALL.len() {
            return Err(Error::InvalidParameter {
                name: "d_img/d_txt",
                reason: format!("observation dims must be >= {}", Aspect::ALL.len()),
            });
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "noise_std",
                reason: format!("must be >= 0, got {}", self.noise_std),
            });
        }
        Ok(())
    }

    pub fn check_slots(&self, slots: &SemanticSlots) -> Result<()> {
        for a in Aspect::ALL {
            let card = self.cardinality(a);
            let value = slots.get(a);
            let ok = match a {
                Aspect::Count => (1..=card).contains(&value),
                _ => value < card,
            };
            if !ok {
                return Err(Error::SlotOutOfRange {
                    slot: a.as_str(),
                    value,
                    cardinality: card,
                });
            }
        }
        Ok(())
    }

    pub fn random_slots<R: Rng + ?Sized>(&self, rng: &mut R) -> SemanticSlots {
        SemanticSlots {
            object: rng.random_range(0..self.n_objects),
            count: rng.random_range(1..=self.max_count),
            location: rng.random_range(0..self.n_locations),
            attribute: rng.random_range(0..self.n_attributes),
        }
    }
}

/// A world: its config plus the two fixed projections.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    image_projection: Vec<Vec<f64>>,
    text_projection: Vec<Vec<f64>>,
}

fn projection(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
    (0..rows)
        .map(|_| (0..cols).map(|_| normal.sample(rng)).collect())
        .collect()
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let code = cfg.code_len();
        let image_projection = projection(cfg.d_img, code, &mut seeded_stream(cfg.seed, "world/image"));
        let text_projection = projection(cfg.d_txt, code, &mut seeded_stream(cfg.seed, "world/text"));
        Ok(Self {
            cfg,
            image_projection,
            text_projection,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    fn one_hot(&self, slots: &SemanticSlots) -> Vec<usize> {
        let mut offset = 0;
        let mut hot = Vec::with_capacity(4);
        for a in Aspect::ALL {
            let index = match a {
                Aspect::Count => slots.count - 1,
                _ => slots.get(a),
            };
            hot.push(offset + index);
            offset += self.cfg.cardinality(a);
        }
        hot
    }

    /// Noise-free observation of `slots`.
    pub fn clean(&self, slots: &SemanticSlots, modality: Modality) -> Result<Vec<f64>> {
        self.cfg.check_slots(slots)?;
        let proj = match modality {
            Modality::Image => &self.image_projection,
            Modality::Text => &self.text_projection,
        };
        let hot = self.one_hot(slots);
        Ok(proj.iter().map(|row| hot.iter().map(|&c| row[c]).sum()).collect())
    }

    pub fn render<R: Rng + ?Sized>(
        &self,
        slots: &SemanticSlots,
        modality: Modality,
        rng: &mut R,
    ) -> Result<EmbVector> {
        let mut values = self.clean(slots, modality)?;
        if self.cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.cfg.noise_std).expect("valid std");
            for v in &mut values {
                *v += normal.sample(rng);
            }
        }
        EmbVector::new(values)
    }
}

/// One-shot render; builds the world projections from `cfg` on every call.
pub fn render<R: Rng + ?Sized>(
    slots: &SemanticSlots,
    cfg: &WorldConfig,
    modality: Modality,
    rng: &mut R,
) -> Result<EmbVector> {
    World::new(cfg.clone())?.render(slots, modality, rng)
}

/// Change only `aspect`, drawing uniformly among its other values.
pub fn minimal_edit<R: Rng + ?Sized>(
    slots: &SemanticSlots,
    aspect: Aspect,
    cfg: &WorldConfig,
    rng: &mut R,
) -> Result<SemanticSlots> {
    let card = cfg.cardinality(aspect);
    if card < 2 {
        return Err(Error::UneditableAspect(aspect.to_string()));
    }
    let base = usize::from(aspect == Aspect::Count);
    let current = slots.get(aspect) - base;
    // draw from card - 1 alternatives, skipping the current value
    let mut pick = rng.random_range(0..card - 1);
    if pick >= current {
        pick += 1;
    }
    let mut edited = *slots;
    edited.set(aspect, pick + base);
    Ok(edited)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub id: usize,
    pub image1: EmbVector,
    pub text1: EmbVector,
    pub image2: EmbVector,
    pub text2: EmbVector,
    pub slots1: SemanticSlots,
    pub slots2: SemanticSlots,
    pub edited_aspect: Aspect,
    pub hamming: usize,
}

fn aspect_sampler(cfg: &WorldConfig, mix: &BTreeMap<Aspect, f64>) -> Result<(Vec<Aspect>, WeightedIndex<f64>)> {
    let mut aspects = Vec::new();
    let mut weights = Vec::new();
    for (&a, &w) in mix {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "aspect_mix",
                reason: format!("weight for {a} must be >= 0, got {w}"),
            });
        }
        if w > 0.0 {
            if cfg.cardinality(a) < 2 {
                return Err(Error::UneditableAspect(a.to_string()));
            }
            aspects.push(a);
            weights.push(w);
        }
    }
    let index = WeightedIndex::new(&weights).map_err(|_| Error::InvalidParameter {
        name: "aspect_mix",
        reason: "needs at least one positive weight".into(),
    })?;
    Ok((aspects, index))
}

pub fn generate_eval_set<R: Rng + ?Sized>(
    world: &World,
    n: usize,
    aspect_mix: &BTreeMap<Aspect, f64>,
    rng: &mut R,
) -> Result<Vec<PairSample>> {
    let cfg = world.config();
    let (aspects, index) = aspect_sampler(cfg, aspect_mix)?;
    (0..n)
        .map(|id| {
            let slots1 = cfg.random_slots(rng);
            let aspect = aspects[index.sample(rng)];
            let slots2 = minimal_edit(&slots1, aspect, cfg, rng)?;
            Ok(PairSample {
                id,
                image1: world.render(&slots1, Modality::Image, rng)?,
                text1: world.render(&slots1, Modality::Text, rng)?,
                image2: world.render(&slots2, Modality::Image, rng)?,
                text2: world.render(&slots2, Modality::Text, rng)?,
                hamming: slots1.hamming(&slots2),
                slots1,
                slots2,
                edited_aspect: aspect,
            })
        })
        .collect()
}

/// One training batch of matched pairs: `images[i]` goes with `texts[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub images: Vec<EmbVector>,
    pub texts: Vec<EmbVector>,
    pub slots: Vec<SemanticSlots>,
}

/// Endless stream of training batches.
///
/// `floor(edit_fraction * batch_size / 2)` couples per batch consist of a fresh
/// scene followed by a minimal edit of it; the rest of the batch is fresh.
#[derive(Debug, Clone)]
pub struct TrainStream<R> {
    world: World,
    batch_size: usize,
    n_couples: usize,
    rng: R,
}

impl<R: Rng> TrainStream<R> {
    pub fn new(world: World, batch_size: usize, edit_fraction: f64, rng: R) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::BatchTooSmall(batch_size));
        }
        if !(0.0..=1.0).contains(&edit_fraction) {
            return Err(Error::InvalidParameter {
                name: "edit_fraction",
                reason: format!("must be in [0, 1], got {edit_fraction}"),
            });
        }
        let n_couples = (edit_fraction * batch_size as f64 / 2.0).floor() as usize;
        Ok(Self {
            world,
            batch_size,
            n_couples,
            rng,
        })
    }

    pub fn couples_per_batch(&self) -> usize {
        self.n_couples
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let cfg = self.world.config().clone();
        let editable: Vec<Aspect> = Aspect::ALL
            .into_iter()
            .filter(|&a| cfg.cardinality(a) >= 2)
            .collect();
        let mut slots = Vec::with_capacity(self.batch_size);
        for _ in 0..self.n_couples {
            let first = cfg.random_slots(&mut self.rng);
            if editable.is_empty() {
                return Err(Error::UneditableAspect("every aspect".into()));
            }
            let aspect = editable[self.rng.random_range(0..editable.len())];
            let second = minimal_edit(&first, aspect, &cfg, &mut self.rng)?;
            slots.push(first);
            slots.push(second);
        }
        while slots.len() < self.batch_size {
            slots.push(cfg.random_slots(&mut self.rng));
        }
        let mut images = Vec::with_capacity(self.batch_size);
        let mut texts = Vec::with_capacity(self.batch_size);
        for s in &slots {
            images.push(self.world.render(s, Modality::Image, &mut self.rng)?);
            texts.push(self.world.render(s, Modality::Text, &mut self.rng)?);
        }
        Ok(Batch { images, texts, slots })
    }
}

impl<R: Rng> Iterator for TrainStream<R> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// A fixed set of batches replayed in order, one pass per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPool {
    batches: Vec<Batch>,
    next: usize,
}

impl BatchPool {
    pub fn draw<R: Rng>(mut stream: TrainStream<R>, n_batches: usize) -> Result<Self> {
        if n_batches == 0 {
            return Err(Error::InvalidParameter {
                name: "pool_batches",
                reason: "a pool needs at least one batch".into(),
            });
        }
        let batches = (0..n_batches)
            .map(|_| stream.next_batch())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { batches, next: 0 })
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }
}

impl Iterator for BatchPool {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch = self.batches[self.next].clone();
        self.next = (self.next + 1) % self.batches.len();
        Some(Ok(batch))
    }
}

pub fn generate_train_stream<R: Rng>(world: World, batch_size: usize, rng: R) -> Result<TrainStream<R>> {
    TrainStream::new(world, batch_size, 0.5, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(noise: f64) -> WorldConfig {
        WorldConfig {
            noise_std: noise,
            seed: 42,
            ..WorldConfig::default()
        }
    }

    fn slots(object: usize, count: usize, location: usize, attribute: usize) -> SemanticSlots {
        SemanticSlots {
            object,
            count,
            location,
            attribute,
        }
    }

    #[test]
    fn render_noise_free_is_deterministic_and_linear() {
        let world = World::new(cfg(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = slots(1, 2, 0, 3);
        let v1 = world.render(&a, Modality::Image, &mut rng).unwrap();
        let v2 = world.render(&a, Modality::Image, &mut rng).unwrap();
        assert_eq!(v1, v2);

        // b differs from a only in the attribute slot
        let b = slots(1, 2, 0, 5);
        let vb = world.render(&b, Modality::Image, &mut rng).unwrap();
        let attr_offset = 8 + 4 + 4;
        for (row, (x, y)) in world.image_projection.iter().zip(v1.values().iter().zip(vb.values())) {
            let delta = row[attr_offset + 5] - row[attr_offset + 3];
            assert!((y - x - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn render_with_noise_is_reproducible() {
        let world = World::new(cfg(0.1)).unwrap();
        let a = slots(0, 1, 2, 3);
        let v1 = world.render(&a, Modality::Text, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let v2 = render(&a, &cfg(0.1), Modality::Text, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(v1, v2);
        let clean = world.clean(&a, Modality::Text).unwrap();
        let resid: f64 = v1.values().iter().zip(&clean).map(|(x, c)| (x - c).powi(2)).sum();
        assert!(resid > 0.0 && resid.sqrt() < 1.0);
    }

    #[test]
    fn render_rejects_bad_slots() {
        let world = World::new(cfg(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            world.render(&slots(8, 1, 0, 0), Modality::Image, &mut rng),
            Err(Error::SlotOutOfRange { slot: "object", .. })
        ));
        assert!(matches!(
            world.render(&slots(0, 0, 0, 0), Modality::Image, &mut rng),
            Err(Error::SlotOutOfRange { slot: "count", .. })
        ));
    }

    #[test]
    fn projections_ignore_stream_position() {
        let w1 = World::new(cfg(0.0)).unwrap();
        let w2 = World::new(cfg(0.0)).unwrap();
        assert_eq!(w1.image_projection, w2.image_projection);
        assert_ne!(w1.image_projection, w1.text_projection);
    }

    #[test]
    fn minimal_edit_changes_exactly_one_slot() {
        let c = cfg(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = slots(3, 2, 1, 4);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let e = minimal_edit(&base, Aspect::Count, &c, &mut rng).unwrap();
            assert_ne!(e.count, 2);
            assert!((1..=4).contains(&e.count));
            assert_eq!(e.hamming(&base), 1);
            seen.insert(e.count);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 3, 4]);

        let one = WorldConfig { n_locations: 1, ..c };
        assert!(matches!(
            minimal_edit(&slots(0, 1, 0, 0), Aspect::Location, &one, &mut rng),
            Err(Error::UneditableAspect(_))
        ));
    }

    #[test]
    fn edit_then_edit_back_is_reachable() {
        let c = cfg(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = slots(0, 1, 3, 0);
        let restored = (0..100).any(|_| {
            let e = minimal_edit(&base, Aspect::Location, &c, &mut rng).unwrap();
            minimal_edit(&e, Aspect::Location, &c, &mut rng).unwrap() == base
        });
        assert!(restored);
    }

    #[test]
    fn eval_set_basics() {
        let world = World::new(cfg(0.1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let only_attr = BTreeMap::from([(Aspect::Attribute, 1.0)]);
        let set = generate_eval_set(&world, 50, &only_attr, &mut rng).unwrap();
        assert_eq!(set.len(), 50);
        for s in &set {
            assert_eq!(s.edited_aspect, Aspect::Attribute);
            assert_eq!(s.hamming, 1);
            assert_ne!(s.slots1.attribute, s.slots2.attribute);
        }
        assert!(generate_eval_set(&world, 0, &only_attr, &mut rng).unwrap().is_empty());

        let bad = BTreeMap::from([(Aspect::Attribute, -1.0)]);
        assert!(generate_eval_set(&world, 3, &bad, &mut rng).is_err());
        let zero = BTreeMap::from([(Aspect::Attribute, 0.0)]);
        assert!(generate_eval_set(&world, 3, &zero, &mut rng).is_err());
    }

    #[test]
    fn train_stream_couples() {
        let world = World::new(cfg(0.0)).unwrap();
        let mut s = TrainStream::new(world.clone(), 4, 1.0, ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.couples_per_batch(), 2);
        let b = s.next_batch().unwrap();
        assert_eq!(b.slots[0].hamming(&b.slots[1]), 1);
        assert_eq!(b.slots[2].hamming(&b.slots[3]), 1);

        let s = TrainStream::new(world.clone(), 16, 0.0, ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.couples_per_batch(), 0);
        let s = generate_train_stream(world.clone(), 16, ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.couples_per_batch(), 4);

        let a: Vec<_> = TrainStream::new(world.clone(), 6, 0.5, ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .take(3)
            .map(|b| b.unwrap())
            .collect();
        let b: Vec<_> = TrainStream::new(world, 6, 0.5, ChaCha8Rng::seed_from_u64(9))
            .unwrap()
            .take(3)
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(a, b);
    }
}
