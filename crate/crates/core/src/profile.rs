//! Pixel-size presets. Every absolute pixel threshold scales with the canvas.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 64 px canvas, 48 px scene views, 24 px instances, 16 px minimum box side.
    #[default]
    Desk,
    /// 256 px canvas, 224 px scene views, 96 px instances, 64 px minimum box side.
    Paper,
}

impl Profile {
    pub fn canvas(self) -> u32 {
        match self {
            Profile::Desk => 64,
            Profile::Paper => 256,
        }
    }

    pub fn scene_size(self) -> usize {
        match self {
            Profile::Desk => 48,
            Profile::Paper => 224,
        }
    }

    pub fn instance_size(self) -> usize {
        match self {
            Profile::Desk => 24,
            Profile::Paper => 96,
        }
    }

    /// Minimum side of proposals, naive boxes and synthetic shapes.
    pub fn min_scale(self) -> u32 {
        match self {
            Profile::Desk => 16,
            Profile::Paper => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidArgument(format!("unknown profile `{other}`"))),
        }
    }
}
