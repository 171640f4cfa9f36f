use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class list; the id of a class is its position. Id 0 is always
/// `background`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassTable {
    names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    id: u8,
    name: String,
}

pub const BACKGROUND: u8 = 0;

/// Class ids of [`ClassTable::seg3`].
pub mod seg {
    pub const PANCREAS: u8 = 1;
    pub const TUMOR: u8 = 2;
}

/// Class ids of [`ClassTable::ta6`].
pub mod ta {
    pub const PANCREAS: u8 = 1;
    pub const PORTAL_SPLENIC_VEIN: u8 = 2;
    pub const SMV: u8 = 3;
    pub const SMA: u8 = 4;
    pub const TRUNCUS_COELIACUS: u8 = 5;
    pub const VESSELS: [u8; 4] = [PORTAL_SPLENIC_VEIN, SMV, SMA, TRUNCUS_COELIACUS];
}

impl ClassTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.first().map(String::as_str) != Some("background") {
            return Err(Error::invalid("class 0 must be `background`"));
        }
        if names.len() > 256 {
            return Err(Error::invalid("at most 256 classes fit a u8 label"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// background, pancreas, tumor.
    pub fn seg3() -> Self {
        Self::new(["background", "pancreas", "tumor"]).unwrap()
    }

    /// background, pancreas and the four peripancreatic vessel classes.
    pub fn ta6() -> Self {
        Self::new([
            "background",
            "pancreas",
            "portal_splenic_vein",
            "smv",
            "sma",
            "truncus_coeliacus",
        ])
        .unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        (0..self.names.len()).map(|i| i as u8)
    }
}

impl TryFrom<Vec<ClassEntry>> for ClassTable {
    type Error = Error;

    fn try_from(entries: Vec<ClassEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::invalid(format!(
                    "class ids must be contiguous from 0, found id {} at position {i}",
                    e.id
                )));
            }
        }
        Self::new(entries.into_iter().map(|e| e.name))
    }
}

impl From<ClassTable> for Vec<ClassEntry> {
    fn from(t: ClassTable) -> Self {
        t.names
            .into_iter()
            .enumerate()
            .map(|(i, name)| ClassEntry { id: i as u8, name })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_tables() {
        let s = ClassTable::seg3();
        assert_eq!(s.id("tumor"), Some(seg::TUMOR));
        let t = ClassTable::ta6();
        assert_eq!(t.len(), 6);
        assert_eq!(t.name(ta::SMA), Some("sma"));
    }

    #[test]
    fn validation() {
        assert!(ClassTable::new(["pancreas"]).is_err());
        assert!(ClassTable::new(["background", "a", "a"]).is_err());
        let bad = r#"[{"id":0,"name":"background"},{"id":2,"name":"x"}]"#;
        assert!(serde_json::from_str::<ClassTable>(bad).is_err());
        let good = serde_json::to_string(&ClassTable::seg3()).unwrap();
        assert_eq!(
            serde_json::from_str::<ClassTable>(&good).unwrap(),
            ClassTable::seg3()
        );
    }
}
