//! Synthetic blob scenes with token lists, the training data for the toy denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::PromptSpec;
use crate::error::{Error, Result};
use crate::nursing::Latent;
use crate::testbed::occurrence::BlobTemplate;

pub const TOKEN_START: usize = 0;
pub const TOKEN_PAD: usize = 1;
pub const TOKEN_OBJECT_A: usize = 2;
pub const TOKEN_OBJECT_B: usize = 3;
pub const TOKEN_ATTRIBUTE: usize = 4;
pub const TOKEN_TWO: usize = 5;
pub const VOCABULARY_SIZE: usize = 6;
pub const PROMPT_LENGTH: usize = 5;
pub const SCENE_CHANNELS: usize = 3;
pub const ATTRIBUTE_CHANNEL: usize = 2;

/// Canvas channel an object token paints into.
pub fn object_channel(token: usize) -> Option<usize> {
    match token {
        TOKEN_OBJECT_A => Some(0),
        TOKEN_OBJECT_B => Some(1),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub token: usize,
    pub center: (usize, usize),
    pub radius: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub token: usize,
    /// Index into `SceneSpec::blobs`.
    pub object: usize,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub blobs: Vec<BlobSpec>,
    pub attributes: Vec<AttributeSpec>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for b in &self.blobs {
            let (i, j) = b.center;
            if i < b.radius || j < b.radius || i + b.radius >= self.height || j + b.radius >= self.width {
                return Err(Error::Spec(format!(
                    "blob for token {} at {:?} with radius {} exceeds the {}x{} canvas",
                    b.token, b.center, b.radius, self.height, self.width
                )));
            }
            if object_channel(b.token).is_none() {
                return Err(Error::Spec(format!("token {} is not an object token", b.token)));
            }
        }
        for a in &self.attributes {
            if a.object >= self.blobs.len() {
                return Err(Error::Spec(format!(
                    "attribute token {} references missing object {}",
                    a.token, a.object
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> Result<Latent> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let mut z = Latent::zeros(SCENE_CHANNELS, h, w);
        let values = z.values_mut();
        let mut paint = |channel: usize, blob: &BlobSpec, amplitude: f64| {
            let t = BlobTemplate::new(channel, blob.radius);
            let r = blob.radius as isize;
            for di in -r..=r {
                for dj in -r..=r {
                    let i = (blob.center.0 as isize + di) as usize;
                    let j = (blob.center.1 as isize + dj) as usize;
                    values[channel * h * w + i * w + j] += amplitude * t.value_at(di as f64, dj as f64);
                }
            }
        };
        for b in &self.blobs {
            paint(object_channel(b.token).unwrap(), b, 1.0);
        }
        for a in &self.attributes {
            paint(ATTRIBUTE_CHANNEL, &self.blobs[a.object], a.intensity);
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFamily {
    #[default]
    TwoObject,
    ObjectAttribute,
    MultiInstance,
}

impl SceneFamily {
    pub const ALL: [SceneFamily; 3] = [SceneFamily::TwoObject, SceneFamily::ObjectAttribute, SceneFamily::MultiInstance];

    pub fn name(self) -> &'static str {
        match self {
            SceneFamily::TwoObject => "two-object",
            SceneFamily::ObjectAttribute => "object-attribute",
            SceneFamily::MultiInstance => "multi-instance",
        }
    }
}

impl std::str::FromStr for SceneFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown scene family '{s}'")))
    }
}

/// Generator settings for one scene family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenerator {
    pub family: SceneFamily,
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    /// Fraction of two-object prompts whose second object blob is left out.
    pub drop_second_fraction: f64,
}

impl SceneGenerator {
    pub fn new(family: SceneFamily) -> Self {
        Self { family, height: 16, width: 16, radius: 3, drop_second_fraction: 0.0 }
    }

    pub fn with_drop(mut self, fraction: f64) -> Self {
        self.drop_second_fraction = fraction;
        self
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn with_radius(mut self, radius: usize) -> Self {
        self.radius = radius;
        self
    }

    fn check(&self) -> Result<()> {
        let side = 2 * self.radius + 1;
        if self.radius == 0 {
            return Err(Error::Spec("blob radius must be positive".into()));
        }
        if side > self.height || side > self.width {
            return Err(Error::Spec(format!(
                "blobs of radius {} exceed the {}x{} canvas",
                self.radius, self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_second_fraction) {
            return Err(Error::Parameter(format!(
                "drop fraction {} is outside [0, 1]",
                self.drop_second_fraction
            )));
        }
        Ok(())
    }

    /// Blobs sharing a channel stay a full diameter apart, others `r + 1`.
    fn place(&self, rng: &mut ChaCha8Rng, taken: &[(usize, usize, usize)], channel: usize) -> Result<(usize, usize)> {
        let r = self.radius;
        for _ in 0..1000 {
            let c = (rng.random_range(r..self.height - r), rng.random_range(r..self.width - r));
            let clear = taken.iter().all(|t| {
                let min_sep = if t.2 == channel { 2 * r + 1 } else { r + 1 } as f64;
                let di = t.0 as f64 - c.0 as f64;
                let dj = t.1 as f64 - c.1 as f64;
                (di * di + dj * dj).sqrt() >= min_sep
            });
            if clear {
                return Ok(c);
            }
        }
        Err(Error::Spec(format!(
            "cannot place separated blobs of radius {r} on a {}x{} canvas",
            self.height, self.width
        )))
    }

    fn blob(&self, rng: &mut ChaCha8Rng, token: usize, taken: &mut Vec<(usize, usize, usize)>) -> Result<BlobSpec> {
        let channel = object_channel(token).expect("object token");
        let center = self.place(rng, taken, channel)?;
        taken.push((center.0, center.1, channel));
        Ok(BlobSpec { token, center, radius: self.radius })
    }

    /// One scene and its token list.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
        use self::{TOKEN_ATTRIBUTE as ATTR, TOKEN_OBJECT_A as A, TOKEN_OBJECT_B as B, TOKEN_PAD as PAD, TOKEN_START as SOT, TOKEN_TWO as TWO};
        let mut taken = Vec::new();
        let mut blobs = Vec::new();
        let mut attributes = Vec::new();
        let u: f64 = rng.random();
        let drop_second = rng.random::<f64>() < self.drop_second_fraction;
        let tokens = match self.family {
            SceneFamily::TwoObject => {
                if u < 0.5 {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    if !drop_second {
                        blobs.push(self.blob(rng, B, &mut taken)?);
                    }
                    vec![SOT, A, PAD, B, PAD]
                } else if u < 0.75 {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    vec![SOT, A, PAD, PAD, PAD]
                } else {
                    blobs.push(self.blob(rng, B, &mut taken)?);
                    vec![SOT, PAD, PAD, B, PAD]
                }
            }
            SceneFamily::ObjectAttribute => {
                if u < 0.5 {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    blobs.push(self.blob(rng, B, &mut taken)?);
                    let object = usize::from(rng.random::<bool>());
                    attributes.push(AttributeSpec { token: ATTR, object, intensity: 1.0 });
                    vec![SOT, ATTR, A, PAD, B]
                } else if u < 0.75 {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    blobs.push(self.blob(rng, B, &mut taken)?);
                    vec![SOT, PAD, A, PAD, B]
                } else if u < 0.875 {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    attributes.push(AttributeSpec { token: ATTR, object: 0, intensity: 1.0 });
                    vec![SOT, ATTR, A, PAD, PAD]
                } else {
                    blobs.push(self.blob(rng, B, &mut taken)?);
                    attributes.push(AttributeSpec { token: ATTR, object: 0, intensity: 1.0 });
                    vec![SOT, ATTR, PAD, PAD, B]
                }
            }
            SceneFamily::MultiInstance => {
                if u < 0.5 {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    if !drop_second {
                        blobs.push(self.blob(rng, B, &mut taken)?);
                    }
                    vec![SOT, TWO, A, PAD, B]
                } else if u < 0.75 {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    blobs.push(self.blob(rng, B, &mut taken)?);
                    vec![SOT, PAD, A, PAD, B]
                } else {
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    blobs.push(self.blob(rng, A, &mut taken)?);
                    vec![SOT, TWO, A, PAD, PAD]
                }
            }
        };
        let scene = SceneSpec { height: self.height, width: self.width, blobs, attributes };
        let latent = scene.render()?;
        Ok(SceneSample { latent, tokens, scene })
    }

    /// Evaluation prompt for this family.
    pub fn task_prompt(&self) -> TaskPrompt {
        use self::{TOKEN_ATTRIBUTE as ATTR, TOKEN_OBJECT_A as A, TOKEN_OBJECT_B as B, TOKEN_PAD as PAD, TOKEN_START as SOT, TOKEN_TWO as TWO};
        let r = self.radius;
        let (tokens, objects, pairs, required) = match self.family {
            SceneFamily::TwoObject => (vec![SOT, A, PAD, B, PAD], vec![1, 3], vec![], vec![1, 1]),
            SceneFamily::ObjectAttribute => (vec![SOT, ATTR, A, PAD, B], vec![2, 4], vec![(1, 2)], vec![1, 1]),
            SceneFamily::MultiInstance => (vec![SOT, TWO, A, PAD, B], vec![2, 4], vec![], vec![2, 1]),
        };
        let targets = objects
            .iter()
            .zip(required)
            .map(|(&pos, count)| OccurrenceTarget {
                position: pos,
                template: BlobTemplate::new(object_channel(tokens[pos]).unwrap(), r),
                required_count: count,
            })
            .collect();
        let spec = PromptSpec::new(tokens.len(), objects, pairs).expect("family prompts are valid");
        TaskPrompt { tokens, spec, targets }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub latent: Latent,
    pub tokens: Vec<usize>,
    pub scene: SceneSpec,
}

/// What must appear in a generated image for one object token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccurrenceTarget {
    /// Position of the object token within the prompt.
    pub position: usize,
    pub template: BlobTemplate,
    pub required_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    pub tokens: Vec<usize>,
    pub spec: PromptSpec,
    pub targets: Vec<OccurrenceTarget>,
}

/// `count` scenes; sample `n` draws from its own stream of the seed.
pub fn gen_scene_dataset(generator: &SceneGenerator, count: usize, seed: u64) -> Result<Vec<SceneSample>> {
    if count == 0 {
        return Err(Error::Parameter("dataset size must be at least 1".into()));
    }
    generator.check()?;
    (0..count)
        .into_par_iter()
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64);
            generator.sample(&mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::occurrence::{blob_occurrence, count_occurrences, OCCURRENCE_THRESHOLD};

    #[test]
    fn empty_dataset_rejected() {
        let g = SceneGenerator::new(SceneFamily::TwoObject);
        assert!(matches!(gen_scene_dataset(&g, 0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn oversized_blobs_rejected() {
        let mut g = SceneGenerator::new(SceneFamily::TwoObject);
        g.radius = 9;
        assert!(matches!(gen_scene_dataset(&g, 3, 1), Err(Error::Spec(_))));
        let s = SceneSpec {
            height: 8,
            width: 8,
            blobs: vec![BlobSpec { token: TOKEN_OBJECT_A, center: (1, 4), radius: 2 }],
            attributes: vec![],
        };
        assert!(matches!(s.render(), Err(Error::Spec(_))));
    }

    #[test]
    fn dangling_attribute_rejected() {
        let s = SceneSpec {
            height: 8,
            width: 8,
            blobs: vec![],
            attributes: vec![AttributeSpec { token: TOKEN_ATTRIBUTE, object: 0, intensity: 1.0 }],
        };
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn deterministic_for_seed() {
        let g = SceneGenerator::new(SceneFamily::ObjectAttribute);
        assert_eq!(gen_scene_dataset(&g, 20, 5).unwrap(), gen_scene_dataset(&g, 20, 5).unwrap());
        assert_ne!(gen_scene_dataset(&g, 20, 5).unwrap(), gen_scene_dataset(&g, 20, 6).unwrap());
    }

    #[test]
    fn single_object_scene_has_one_blob() {
        let g = SceneGenerator::new(SceneFamily::TwoObject);
        let data = gen_scene_dataset(&g, 200, 11).unwrap();
        let singles: Vec<_> = data.iter().filter(|s| s.tokens == [0, TOKEN_OBJECT_A, 1, 1, 1]).collect();
        assert!(!singles.is_empty());
        for s in singles {
            let a = BlobTemplate::new(0, 3);
            let b = BlobTemplate::new(1, 3);
            assert_eq!(count_occurrences(&s.latent, &a, OCCURRENCE_THRESHOLD).len(), 1);
            assert!(!blob_occurrence(&s.latent, &b).present);
        }
    }

    #[test]
    fn drop_fraction_removes_second_object() {
        let g = SceneGenerator::new(SceneFamily::TwoObject).with_drop(1.0);
        for s in gen_scene_dataset(&g, 100, 2).unwrap() {
            if s.tokens == [0, TOKEN_OBJECT_A, 1, TOKEN_OBJECT_B, 1] {
                assert_eq!(s.scene.blobs.len(), 1);
            }
        }
    }

    #[test]
    fn task_prompts_validate() {
        for f in SceneFamily::ALL {
            let p = SceneGenerator::new(f).task_prompt();
            p.spec.validate().unwrap();
            assert_eq!(p.tokens.len(), PROMPT_LENGTH);
        }
    }
}
