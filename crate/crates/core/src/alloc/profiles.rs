//! Named allocator profiles shipped with the crate.

use std::path::Path;

use super::{AllocatorConfig, ConfigError};

const BUILTIN: &[(&str, &str)] = &[
    ("ideal", include_str!("../../profiles/ideal.json")),
    (
        "avrlibc-like",
        include_str!("../../profiles/avrlibc-like.json"),
    ),
    (
        "dlmalloc-like",
        include_str!("../../profiles/dlmalloc-like.json"),
    ),
    (
        "tcmalloc-like",
        include_str!("../../profiles/tcmalloc-like.json"),
    ),
    ("php-like", include_str!("../../profiles/php-like.json")),
];

pub const NAMES: [&str; 5] = [
    "ideal",
    "avrlibc-like",
    "dlmalloc-like",
    "tcmalloc-like",
    "php-like",
];

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("unknown profile `{0}` (expected one of {names}, or a path to a JSON file)", names = NAMES.join(", "))]
    Unknown(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {origin}: {source}")]
    Json {
        origin: String,
        source: serde_json::Error,
    },
    #[error("invalid profile {origin}: {source}")]
    Invalid { origin: String, source: ConfigError },
}

pub fn from_json(text: &str, origin: &str) -> Result<AllocatorConfig, ProfileError> {
    let config: AllocatorConfig =
        serde_json::from_str(text).map_err(|source| ProfileError::Json {
            origin: origin.to_string(),
            source,
        })?;
    config.validate().map_err(|source| ProfileError::Invalid {
        origin: origin.to_string(),
        source,
    })?;
    Ok(config)
}

/// A shipped profile by name.
pub fn builtin(name: &str) -> Option<AllocatorConfig> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| from_json(text, n).expect("shipped profiles are valid"))
}

/// Resolve a profile name, falling back to reading `spec` as a file path.
pub fn load(spec: &str) -> Result<AllocatorConfig, ProfileError> {
    if let Some(config) = builtin(spec) {
        return Ok(config);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(ProfileError::Unknown(spec.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: spec.to_string(),
        source,
    })?;
    let mut config = from_json(&text, spec)?;
    if config.name.is_none() {
        config.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::{AllocatorKind, SizeRoute, SplitFrom};

    #[test]
    fn every_shipped_profile_loads() {
        for name in NAMES {
            let config = builtin(name).unwrap();
            assert_eq!(config.label(), name);
        }
        assert_eq!(builtin("ideal").unwrap(), AllocatorConfig::ideal());
    }

    #[test]
    fn profile_axes() {
        assert_eq!(builtin("avrlibc-like").unwrap().split_from, SplitFrom::End);
        assert_eq!(builtin("dlmalloc-like").unwrap().header_bytes, 8);
        let php = builtin("php-like").unwrap();
        assert_eq!(php.kind, AllocatorKind::SegregatedStorage);
        assert_eq!(php.size_classes.len(), 30);
    }

    #[test]
    fn php_three_quarter_page_boundary_is_small() {
        let php = builtin("php-like").unwrap();
        assert!(matches!(
            php.size_class_of(3072),
            SizeRoute::Small {
                class_size: 3072,
                ..
            }
        ));
        assert_eq!(
            php.size_class_of(3073),
            SizeRoute::Pages { footprint: 4096 }
        );
        assert_eq!(php.size_class_of(9).footprint(), 16);
        assert!(matches!(
            php.size_class_of(1),
            SizeRoute::Small { class_size: 8, .. }
        ));
        assert_eq!(
            php.size_class_of(2 << 20),
            SizeRoute::Mapped { footprint: 2 << 20 }
        );
    }

    #[test]
    fn tcmalloc_32k_goes_to_pages() {
        let tc = builtin("tcmalloc-like").unwrap();
        assert_eq!(
            tc.size_class_of(32768),
            SizeRoute::Pages { footprint: 32768 }
        );
        assert!(matches!(
            tc.size_class_of(1),
            SizeRoute::Small { class_size: 8, .. }
        ));
    }

    #[test]
    fn unknown_name_is_reported() {
        assert!(matches!(
            load("no-such-profile"),
            Err(ProfileError::Unknown(_))
        ));
    }
}
