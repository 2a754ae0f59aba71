//! Seeded synthetic corpora for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control_safety::{Bucket, StyleRegistry};
use crate::imagefeat::{FeatureKind, ImageBank, ImageFeatures, FEATURE_DIM};
use crate::numerics::Tensor;
use crate::textdata::{DatasetRole, Episode};

const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
const ANIMALS: [&str; 4] = ["dog", "cat", "horse", "bird"];
const PLACES: [&str; 4] = ["park", "beach", "kitchen", "forest"];

/// Attribute values that determine an image's caption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneAttributes {
    pub color: usize,
    pub animal: usize,
    pub place: usize,
}

impl SceneAttributes {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            color: rng.gen_range(0..COLORS.len()),
            animal: rng.gen_range(0..ANIMALS.len()),
            place: rng.gen_range(0..PLACES.len()),
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} in the {}",
            COLORS[self.color], ANIMALS[self.animal], PLACES[self.place]
        )
    }

    pub fn color(&self) -> &'static str {
        COLORS[self.color]
    }

    pub fn animal(&self) -> &'static str {
        ANIMALS[self.animal]
    }

    pub fn place(&self) -> &'static str {
        PLACES[self.place]
    }
}

/// Maps scene attributes to feature matrices: each row is the sum of one
/// fixed random prototype per attribute value plus independent noise.
#[derive(Clone, Debug)]
pub struct SceneRenderer {
    kind: FeatureKind,
    prototypes: [Vec<Vec<f32>>; 3],
    noise: f32,
}

/// Box-Muller normal draw.
fn standard_normal(rng: &mut impl Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

impl SceneRenderer {
    pub fn new(kind: FeatureKind, noise: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| (0..FEATURE_DIM).map(|_| standard_normal(&mut rng)).collect())
                .collect()
        };
        let prototypes = [table(COLORS.len()), table(ANIMALS.len()), table(PLACES.len())];
        Self {
            kind,
            prototypes,
            noise,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn render(&self, image_id: &str, scene: SceneAttributes, rng: &mut impl Rng) -> ImageFeatures {
        let rows = self.kind.rows();
        let mut data = Vec::with_capacity(rows * FEATURE_DIM);
        for _ in 0..rows {
            for j in 0..FEATURE_DIM {
                let signal = self.prototypes[0][scene.color][j]
                    + self.prototypes[1][scene.animal][j]
                    + self.prototypes[2][scene.place][j];
                data.push(signal + self.noise * standard_normal(rng));
            }
        }
        ImageFeatures::new(
            self.kind,
            image_id,
            Tensor::new(vec![rows, FEATURE_DIM], data).expect("fixed shape"),
        )
        .expect("fixed shape")
    }
}

/// Episodes that reference images, with the features they need.
#[derive(Clone, Debug)]
pub struct SynthImageTask {
    pub episodes: Vec<Episode>,
    pub images: ImageBank,
    pub scenes: Vec<SceneAttributes>,
}

fn image_episode(role: DatasetRole, image_id: String, label: String) -> Episode {
    Episode {
        dataset_role: role,
        context_turns: Vec::new(),
        persona_lines: Vec::new(),
        knowledge: None,
        image_ref: Some(image_id),
        style: None,
        partner_style: None,
        label,
    }
}

/// COCO-style captioning: empty context, caption fully determined by the
/// image. Image ids are `{prefix}{index}`.
pub fn synth_captions(renderer: &SceneRenderer, n: usize, prefix: &str, seed: u64) -> SynthImageTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = ImageBank::new(renderer.kind());
    let mut episodes = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let scene = SceneAttributes::random(&mut rng);
        let id = format!("{prefix}{i:05}");
        images.insert(renderer.render(&id, scene, &mut rng)).expect("kind matches");
        episodes.push(image_episode(DatasetRole::Coco, id, scene.caption()));
        scenes.push(scene);
    }
    SynthImageTask {
        episodes,
        images,
        scenes,
    }
}

/// Styles used by [`synth_image_chat`], chosen to be unambiguous.
pub const SYNTH_POSITIVE_STYLES: [&str; 4] = ["Cheerful", "Kind", "Sweet", "Caring"];
pub const SYNTH_NEGATIVE_STYLES: [&str; 4] = ["Cruel", "Hostile", "Rude", "Angry"];

fn styled_line(bucket: Bucket, scene: SceneAttributes, rng: &mut impl Rng) -> String {
    let (c, a, p) = (scene.color(), scene.animal(), scene.place());
    let options: Vec<String> = match bucket {
        Bucket::Positive => vec![
            format!("what a lovely {c} {a} in the {p}"),
            format!("i adore that sweet {c} {a}"),
            format!("the {c} {a} makes me so happy"),
        ],
        Bucket::Neutral => vec![format!("there is a {c} {a} in the {p}")],
        Bucket::Negative => vec![
            format!("that {c} {a} is ugly and stupid"),
            format!("what a pathetic {a} you idiot"),
            format!("i hate you and your {c} {a}"),
        ],
    };
    options.choose(rng).expect("non-empty").clone()
}

/// Image-Chat-style episodes: the label mentions the image's color and
/// animal, and its tone follows the style bucket (negative styles use
/// blocklisted words). About a third are first turns; the rest carry a
/// partner turn in a random style.
pub fn synth_image_chat(
    renderer: &SceneRenderer,
    registry: &StyleRegistry,
    n: usize,
    prefix: &str,
    seed: u64,
) -> SynthImageTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = ImageBank::new(renderer.kind());
    let mut episodes = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    let pick_style = |rng: &mut ChaCha8Rng| -> &'static str {
        if rng.gen_bool(0.5) {
            SYNTH_POSITIVE_STYLES.choose(rng).copied().expect("non-empty")
        } else {
            SYNTH_NEGATIVE_STYLES.choose(rng).copied().expect("non-empty")
        }
    };
    for i in 0..n {
        let scene = SceneAttributes::random(&mut rng);
        let id = format!("{prefix}{i:05}");
        images.insert(renderer.render(&id, scene, &mut rng)).expect("kind matches");
        let style = pick_style(&mut rng);
        let bucket = registry.bucket(style).expect("synthetic styles are registered");
        let mut ep = image_episode(DatasetRole::ImageChat, id, styled_line(bucket, scene, &mut rng));
        ep.style = Some(style.to_string());
        if !rng.gen_bool(1.0 / 3.0) {
            let partner = pick_style(&mut rng);
            let pb = registry.bucket(partner).expect("synthetic styles are registered");
            ep.context_turns.push(styled_line(pb, scene, &mut rng));
            ep.partner_style = Some(partner.to_string());
        }
        episodes.push(ep);
        scenes.push(scene);
    }
    SynthImageTask {
        episodes,
        images,
        scenes,
    }
}

const PROMPTS: [&str; 4] = [
    "how was your weekend",
    "what did you do today",
    "tell me about your day",
    "any plans for tonight",
];
const ACTIVITIES: [&str; 6] = [
    "went to the park",
    "cooked a big dinner",
    "watched a movie",
    "went for a long walk",
    "read a good book",
    "played some music",
];
const FEMALE_SUBJECTS: [&str; 4] = ["my sister", "my mother", "my aunt", "my daughter"];
const MALE_SUBJECTS: [&str; 4] = ["my brother", "my father", "my uncle", "my son"];
const NEUTRAL_SUBJECTS: [&str; 4] = ["i", "my friend", "my neighbor", "we"];

/// Chit-chat whose labels mention female relatives, male relatives, both,
/// or neither (40% neither, 20% each otherwise).
pub fn synth_gendered_dialogue(n: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let activity = ACTIVITIES.choose(&mut rng).expect("non-empty");
            let u: f64 = rng.gen();
            let subject = if u < 0.4 {
                NEUTRAL_SUBJECTS.choose(&mut rng).expect("non-empty").to_string()
            } else if u < 0.6 {
                FEMALE_SUBJECTS.choose(&mut rng).expect("non-empty").to_string()
            } else if u < 0.8 {
                MALE_SUBJECTS.choose(&mut rng).expect("non-empty").to_string()
            } else {
                format!(
                    "{} and {}",
                    FEMALE_SUBJECTS.choose(&mut rng).expect("non-empty"),
                    MALE_SUBJECTS.choose(&mut rng).expect("non-empty")
                )
            };
            Episode {
                dataset_role: DatasetRole::Convai2,
                context_turns: vec![PROMPTS.choose(&mut rng).expect("non-empty").to_string()],
                persona_lines: Vec::new(),
                knowledge: None,
                image_ref: None,
                style: None,
                partner_style: None,
                label: format!("{subject} {activity}"),
            }
        })
        .collect()
}

const TOPICS: [&str; 8] = ["music", "cooking", "hiking", "movies", "books", "soccer", "painting", "travel"];

/// Text-only dialogue for the given role: the label answers the last turn
/// by repeating its topic word. Persona-style roles carry persona lines and
/// `wow` carries a knowledge line.
pub fn synth_text_dialogue(role: DatasetRole, n: usize, seed: u64) -> Vec<Episode> {
    assert!(!role.has_image(), "text dialogue roles only");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (role as u64) << 32);
    (0..n)
        .map(|_| {
            let topic = TOPICS.choose(&mut rng).expect("non-empty");
            let other = TOPICS.choose(&mut rng).expect("non-empty");
            let (persona_lines, knowledge, turns, label) = match role {
                DatasetRole::Convai2 | DatasetRole::Bst => (
                    vec![format!("i like {topic}")],
                    None,
                    vec!["hi how are you".to_string(), "what do you like".to_string()],
                    format!("i really like {topic}"),
                ),
                DatasetRole::Ed => (
                    Vec::new(),
                    None,
                    vec![format!("i was so sad about my {topic} class")],
                    format!("sorry to hear about your {topic} class"),
                ),
                DatasetRole::Wow => (
                    Vec::new(),
                    Some(format!("{topic} is a popular hobby")),
                    vec![format!("tell me about {topic}")],
                    format!("{topic} is popular and fun"),
                ),
                _ => (
                    Vec::new(),
                    None,
                    vec![format!("do you like {other}")],
                    format!("yes i like {other}"),
                ),
            };
            Episode {
                dataset_role: role,
                context_turns: turns,
                persona_lines,
                knowledge,
                image_ref: None,
                style: None,
                partner_style: None,
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_safety::{classify_gender, Blocklist, GenderLexicon};

    #[test]
    fn captions_are_seeded_and_valid() {
        let r = SceneRenderer::new(FeatureKind::Global, 0.5, 1);
        let a = synth_captions(&r, 5, "c", 7);
        let b = synth_captions(&r, 5, "c", 7);
        assert_eq!(a.episodes, b.episodes);
        assert_eq!(a.images.entries(), b.images.entries());
        for ep in &a.episodes {
            ep.validate().unwrap();
            assert!(a.images.get(ep.image_ref.as_deref().unwrap()).is_some());
        }
    }

    #[test]
    fn features_separate_scenes() {
        let r = SceneRenderer::new(FeatureKind::Global, 0.5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SceneAttributes {
            color: 0,
            animal: 1,
            place: 2,
        };
        let t = SceneAttributes { color: 1, ..s };
        let dist = |x: &ImageFeatures, y: &ImageFeatures| -> f32 {
            x.matrix()
                .data()
                .iter()
                .zip(y.matrix().data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let a1 = r.render("a", s, &mut rng);
        let a2 = r.render("b", s, &mut rng);
        let b1 = r.render("c", t, &mut rng);
        assert!(dist(&a1, &a2) * 4.0 < dist(&a1, &b1));
    }

    #[test]
    fn styled_chat_tone_follows_bucket() {
        let reg = StyleRegistry::builtin();
        let bl = Blocklist::builtin();
        let r = SceneRenderer::new(FeatureKind::Global, 0.5, 1);
        let task = synth_image_chat(&r, &reg, 200, "ic", 3);
        let mut first_turns = 0;
        for ep in &task.episodes {
            ep.validate().unwrap();
            let negative = reg.bucket(ep.style.as_deref().unwrap()) == Some(Bucket::Negative);
            assert_eq!(!bl.matches(&ep.label).is_empty(), negative, "{}", ep.label);
            first_turns += ep.is_first_turn() as usize;
        }
        assert!((40..100).contains(&first_turns), "{first_turns}");
    }

    #[test]
    fn gendered_dialogue_mix() {
        let lex = GenderLexicon::builtin();
        let eps = synth_gendered_dialogue(1000, 4);
        let gendered = eps
            .iter()
            .filter(|e| {
                let f = classify_gender(&e.label, &lex);
                f.female || f.male
            })
            .count();
        assert!((550..650).contains(&gendered), "{gendered}");
        for s in NEUTRAL_SUBJECTS {
            let f = classify_gender(s, &lex);
            assert!(!f.female && !f.male, "{s}");
        }
    }

    #[test]
    fn text_dialogue_roles() {
        for role in [DatasetRole::Convai2, DatasetRole::Ed, DatasetRole::Wow, DatasetRole::Bst] {
            let eps = synth_text_dialogue(role, 10, 1);
            assert!(eps.iter().all(|e| e.validate().is_ok() && e.dataset_role == role));
        }
        assert!(synth_text_dialogue(DatasetRole::Wow, 3, 1)[0].knowledge.is_some());
    }
}
