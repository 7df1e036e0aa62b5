//! Textual action grammar for the household simulator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// `name id`, e.g. `apple 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityRef {
    pub name: String,
    pub id: u32,
}

impl EntityRef {
    pub fn new(name: impl Into<String>, id: u32) -> Self {
        Self {
            name: name.into(),
            id,
        }
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.name, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum HouseholdAction {
    GoTo(EntityRef),
    Open(EntityRef),
    Close(EntityRef),
    Take { object: EntityRef, from: EntityRef },
    Put { object: EntityRef, on: EntityRef },
    Clean { object: EntityRef, with: EntityRef },
    Heat { object: EntityRef, with: EntityRef },
    Cool { object: EntityRef, with: EntityRef },
    Use(EntityRef),
    Examine(EntityRef),
}

impl fmt::Display for HouseholdAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use HouseholdAction::*;
        match self {
            GoTo(r) => write!(f, "go to {r}"),
            Open(r) => write!(f, "open {r}"),
            Close(r) => write!(f, "close {r}"),
            Take { object, from } => write!(f, "take {object} from {from}"),
            Put { object, on } => write!(f, "put {object} in/on {on}"),
            Clean { object, with } => write!(f, "clean {object} with {with}"),
            Heat { object, with } => write!(f, "heat {object} with {with}"),
            Cool { object, with } => write!(f, "cool {object} with {with}"),
            Use(r) => write!(f, "use {r}"),
            Examine(o) => write!(f, "examine {o}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable household action `{0}`")]
pub struct ActionParseError(pub String);

fn entity(name: Option<&&str>, id: Option<&&str>) -> Option<EntityRef> {
    let name = name?;
    let id = id?.parse().ok()?;
    if name.is_empty() || name.chars().any(|c| !c.is_ascii_alphanumeric()) {
        return None;
    }
    Some(EntityRef::new(*name, id))
}

impl FromStr for HouseholdAction {
    type Err = ActionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use HouseholdAction::*;
        let t: Vec<&str> = s.split_whitespace().collect();
        let err = || ActionParseError(s.to_string());
        let parsed = match t.as_slice() {
            ["go", "to", _, _] => entity(t.get(2), t.get(3)).map(GoTo),
            ["open", _, _] => entity(t.get(1), t.get(2)).map(Open),
            ["close", _, _] => entity(t.get(1), t.get(2)).map(Close),
            ["use", _, _] => entity(t.get(1), t.get(2)).map(Use),
            ["examine", _, _] => entity(t.get(1), t.get(2)).map(Examine),
            ["take", _, _, "from", _, _] => entity(t.get(1), t.get(2))
                .zip(entity(t.get(4), t.get(5)))
                .map(|(object, from)| Take { object, from }),
            ["put", _, _, "in/on" | "in" | "on", _, _] => entity(t.get(1), t.get(2))
                .zip(entity(t.get(4), t.get(5)))
                .map(|(object, on)| Put { object, on }),
            [verb @ ("clean" | "heat" | "cool"), _, _, "with", _, _] => entity(t.get(1), t.get(2))
                .zip(entity(t.get(4), t.get(5)))
                .map(|(object, with)| match *verb {
                    "clean" => Clean { object, with },
                    "heat" => Heat { object, with },
                    _ => Cool { object, with },
                }),
            _ => None,
        };
        parsed.ok_or_else(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_every_form() {
        for s in [
            "go to countertop 1",
            "open fridge 1",
            "close fridge 1",
            "take plunger 1 from toilet 1",
            "put apple 2 in/on diningtable 1",
            "clean mug 1 with sinkbasin 1",
            "heat egg 1 with microwave 1",
            "cool plate 1 with fridge 1",
            "use desklamp 1",
            "examine book 1",
        ] {
            let a: HouseholdAction = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
    }

    #[test]
    fn put_accepts_single_preposition() {
        let a: HouseholdAction = "put apple 1 on shelf 1".parse().unwrap();
        assert_eq!(a.to_string(), "put apple 1 in/on shelf 1");
    }

    #[test]
    fn rejects_garbage() {
        for s in ["", "go north", "take apple from table 1", "heat egg x with microwave 1"] {
            assert!(s.parse::<HouseholdAction>().is_err(), "{s}");
        }
    }

    proptest! {
        #[test]
        fn display_parse_roundtrip(name in "[a-z]{1,10}", id in 1u32..50, r in "[a-z]{1,10}", rid in 1u32..5) {
            let a = HouseholdAction::Take { object: EntityRef::new(name, id), from: EntityRef::new(r, rid) };
            prop_assert_eq!(a.to_string().parse::<HouseholdAction>().unwrap(), a);
        }
    }
}
