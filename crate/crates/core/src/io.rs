//! JSON documents for instances, allocations and reports.
//!
//! Files are UTF-8 with LF newlines and always end with a newline.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;
use crate::instance::{Allocation, Instance, InstanceDoc};

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads an instance; invariant violations are reported as
/// [`NswError::InvalidInstance`](crate::NswError::InvalidInstance).
pub fn load_instance(path: impl AsRef<Path>) -> Result<Instance> {
    let doc: InstanceDoc = load_json(path)?;
    Instance::try_from(doc)
}

pub fn save_instance(path: impl AsRef<Path>, inst: &Instance) -> Result<()> {
    save_json(path, inst)
}

/// Loads an allocation and checks it against `inst`.
pub fn load_allocation(path: impl AsRef<Path>, inst: &Instance) -> Result<Allocation> {
    let mut x: Allocation = load_json(path)?;
    x.check_feasible(inst)?;
    x.refresh_integral();
    Ok(x)
}

pub fn save_allocation(path: impl AsRef<Path>, x: &Allocation) -> Result<()> {
    save_json(path, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{generate, GeneratorConfig};

    #[test]
    fn malformed_document_is_rejected() {
        let r: Result<Instance> = serde_json::from_str("{\"n\": 1}").map_err(Into::into);
        assert!(r.is_err());
        let bad = r#"{"n":1,"m":1,"k":[2],"u":[[[1.0,2.0]]]}"#;
        let err = serde_json::from_str::<Instance>(bad).unwrap_err();
        assert!(err.to_string().contains("nonincreasing marginals"));
    }

    #[test]
    fn file_round_trip() {
        let inst = generate(&GeneratorConfig::new(7, 3, 2, (1, 3))).unwrap();
        let dir = tempdir();
        let path = dir.join("inst.json");
        save_instance(&path, &inst).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert_eq!(load_instance(&path).unwrap(), inst);
        fs::remove_dir_all(dir).ok();
    }

    fn tempdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("nsw-io-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }
}
