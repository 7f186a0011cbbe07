use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

/// One variant or a list of them; a list must hold exactly one entry to be
/// valid, which is checked against the registry, not here.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Choice {
    One(String),
    Many(Vec<String>),
}

/// Family-to-variant map in submission order. Unlike a JSON object decoded
/// into a map, repeated keys are kept so they can be rejected.
#[derive(Debug, Default)]
pub struct Selection(pub Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for Selection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Selection;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping module families to variant ids")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Selection, A::Error> {
                let mut out = Vec::new();
                while let Some(family) = map.next_key::<String>()? {
                    let choice = map.next_value::<Choice>().map_err(|e| de::Error::custom(format!("{family}: {e}")))?;
                    let variants = match choice {
                        Choice::One(v) => vec![v],
                        Choice::Many(vs) => vs,
                    };
                    out.push((family, variants));
                }
                Ok(Selection(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRequest {
    pub selection: Selection,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_duplicates_and_lists() {
        let r: ModelRequest =
            serde_json::from_str(r#"{"selection": {"Head": "det-head", "PV2BEV": ["sca", "gkt"], "Head": "x"}}"#).unwrap();
        let s = r.selection.0;
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].1, vec!["sca", "gkt"]);
        assert_eq!(s[2], ("Head".to_string(), vec!["x".to_string()]));
    }
}
