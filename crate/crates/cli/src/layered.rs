//! Flag structs double as JSON config files: values given on the command
//! line win over values from `--config`.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;

pub trait Layered: Sized {
    /// Fills every unset field of `self` from `base`.
    fn layer(self, base: Self) -> Self;
}

/// Implements [`Layered`] for a struct from its field lists: optional
/// values, boolean switches, lists and nested layered structs. All other
/// fields are taken from the command line.
macro_rules! layered {
    ($ty:ty { opt: [$($opt:ident),*], flag: [$($flag:ident),*], list: [$($list:ident),*], nested: [$($nested:ident),*] }) => {
        impl $crate::layered::Layered for $ty {
            #[allow(clippy::needless_update)]
            fn layer(self, base: Self) -> Self {
                Self {
                    $($opt: self.$opt.or(base.$opt),)*
                    $($flag: self.$flag || base.$flag,)*
                    $($list: if self.$list.is_empty() { base.$list } else { self.$list },)*
                    $($nested: $crate::layered::Layered::layer(self.$nested, base.$nested),)*
                    ..self
                }
            }
        }
    };
}
pub(crate) use layered;

pub fn with_config<T: Layered + DeserializeOwned>(cli: T, config: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = config else {
        return Ok(cli);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: T = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cli.layer(file))
}
