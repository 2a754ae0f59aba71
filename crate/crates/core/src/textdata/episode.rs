use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TextDataError;

/// Which corpus an episode came from. Only `image_chat` and `coco` carry
/// images; only `image_chat` carries styles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Convai2,
    Ed,
    Wow,
    Bst,
    ImageChat,
    Coco,
    Reddit,
}

impl DatasetRole {
    pub const ALL: [DatasetRole; 7] = [
        DatasetRole::Convai2,
        DatasetRole::Ed,
        DatasetRole::Wow,
        DatasetRole::Bst,
        DatasetRole::ImageChat,
        DatasetRole::Coco,
        DatasetRole::Reddit,
    ];

    pub fn has_image(self) -> bool {
        matches!(self, DatasetRole::ImageChat | DatasetRole::Coco)
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetRole::Convai2 => "convai2",
            DatasetRole::Ed => "ed",
            DatasetRole::Wow => "wow",
            DatasetRole::Bst => "bst",
            DatasetRole::ImageChat => "image_chat",
            DatasetRole::Coco => "coco",
            DatasetRole::Reddit => "reddit",
        }
    }
}

impl std::fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown dataset role `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub dataset_role: DatasetRole,
    #[serde(default)]
    pub context_turns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub persona_lines: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    /// Style of the other speaker in the previous turn, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner_style: Option<String>,
    pub label: String,
}

impl Episode {
    pub fn validate(&self) -> Result<(), TextDataError> {
        let role = self.dataset_role;
        if role.has_image() != self.image_ref.is_some() {
            return Err(TextDataError::InvalidEpisode(format!(
                "{role} episodes {} an image_ref",
                if role.has_image() { "require" } else { "must not have" }
            )));
        }
        if (self.style.is_some() || self.partner_style.is_some()) && role != DatasetRole::ImageChat {
            return Err(TextDataError::InvalidEpisode(format!(
                "style is only allowed for image_chat, found on {role}"
            )));
        }
        if self.label.is_empty() {
            return Err(TextDataError::InvalidEpisode("empty label".into()));
        }
        Ok(())
    }

    /// An Image-Chat episode with no prior dialogue.
    pub fn is_first_turn(&self) -> bool {
        self.dataset_role == DatasetRole::ImageChat && self.context_turns.is_empty()
    }
}

/// Parses JSON Lines; blank lines are skipped, every episode is validated.
pub fn read_episodes(reader: impl Read) -> Result<Vec<Episode>, TextDataError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| TextDataError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        ep.validate().map_err(|e| TextDataError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(ep);
    }
    Ok(out)
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>, TextDataError> {
    read_episodes(std::fs::File::open(path)?)
}

pub fn write_episodes(mut w: impl Write, episodes: &[Episode]) -> Result<(), TextDataError> {
    for ep in episodes {
        let line = serde_json::to_string(ep).map_err(|e| TextDataError::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
