use serde::{Deserialize, Serialize};

use super::Episode;

pub const PERSONA_PREFIX: &str = "your persona: ";
pub const STYLE_PREFIX: &str = "[style] ";

/// Already-resolved conditioning for one example.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlSettings {
    /// Concrete style or bucket string for the style line; `None` omits it.
    pub style: Option<String>,
    /// Gender control string such as `"f0 m0"`; `None` omits it.
    pub gender: Option<String>,
    /// Whether a knowledge line is included when the episode has one.
    pub include_knowledge: bool,
}

/// Flattens an episode into the encoder input.
///
/// Lines, joined by `\n`: persona lines (each prefixed), the knowledge line,
/// the dialogue turns, then the style line. Gender control tokens, when
/// enabled, are appended to the very end after a single space.
pub fn assemble_context(ep: &Episode, controls: &ControlSettings) -> String {
    let mut lines: Vec<String> = ep
        .persona_lines
        .iter()
        .map(|p| format!("{PERSONA_PREFIX}{p}"))
        .collect();
    if controls.include_knowledge {
        if let Some(k) = &ep.knowledge {
            lines.push(k.clone());
        }
    }
    lines.extend(ep.context_turns.iter().cloned());
    if let Some(style) = &controls.style {
        lines.push(format!("{STYLE_PREFIX}{style}"));
    }
    let mut text = lines.join("\n");
    if let Some(gender) = &controls.gender {
        text.push(' ');
        text.push_str(gender);
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::DatasetRole;
    use rand::{Rng, SeedableRng};

    fn ep(persona: &[&str], turns: &[&str]) -> Episode {
        Episode {
            dataset_role: DatasetRole::Convai2,
            context_turns: turns.iter().map(|s| s.to_string()).collect(),
            persona_lines: persona.iter().map(|s| s.to_string()).collect(),
            knowledge: None,
            image_ref: None,
            style: None,
            partner_style: None,
            label: "ok".into(),
        }
    }

    #[test]
    fn layout() {
        let e = ep(&["i like dogs"], &["hi!"]);
        assert_eq!(
            assemble_context(&e, &ControlSettings::default()),
            "your persona: i like dogs\nhi!"
        );
        let c = ControlSettings {
            style: Some("Happy".into()),
            gender: Some("f0 m0".into()),
            include_knowledge: false,
        };
        assert_eq!(
            assemble_context(&e, &c),
            "your persona: i like dogs\nhi!\n[style] Happy f0 m0"
        );
        let c = ControlSettings {
            style: Some("Happy".into()),
            ..Default::default()
        };
        let text = assemble_context(&e, &c);
        assert_eq!(text.lines().last(), Some("[style] Happy"));
    }

    #[test]
    fn knowledge_flag() {
        let mut e = ep(&[], &["tell me about rome"]);
        e.dataset_role = DatasetRole::Wow;
        e.knowledge = Some("Rome is a city.".into());
        let on = ControlSettings {
            include_knowledge: true,
            ..Default::default()
        };
        assert_eq!(assemble_context(&e, &on), "Rome is a city.\ntell me about rome");
        assert_eq!(assemble_context(&e, &ControlSettings::default()), "tell me about rome");
    }

    #[test]
    fn injective_over_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let words = ["a", "b", "cat", "persona", "hi", "style", "f0"];
        let rand_line = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
            let n = rng.gen_range(1..4);
            (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let mut seen = std::collections::HashMap::new();
        for _ in 0..3000 {
            let persona: Vec<String> = (0..rng.gen_range(0..3)).map(|_| rand_line(&mut rng)).collect();
            let turns: Vec<String> = (0..rng.gen_range(1..4)).map(|_| rand_line(&mut rng)).collect();
            let style = rng.gen_bool(0.5).then(|| rand_line(&mut rng));
            let e = Episode {
                persona_lines: persona.clone(),
                context_turns: turns.clone(),
                ..ep(&[], &[])
            };
            let c = ControlSettings {
                style: style.clone(),
                gender: Some("f1 m0".into()),
                include_knowledge: false,
            };
            let key = (persona, turns, style);
            let text = assemble_context(&e, &c);
            if let Some(prev) = seen.insert(text.clone(), key.clone()) {
                assert_eq!(prev, key, "collision on {text:?}");
            }
        }
    }
}
