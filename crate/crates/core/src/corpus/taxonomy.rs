//! The fixed label registry: domains, act types and slots.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

macro_rules! label_enum {
    ($(#[$m:meta])* $name:ident, $kind:expr, { $($variant:ident => $text:expr),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Taxonomy { kind: $kind, label: s.to_string() }),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl Serialize for $name {
            fn serialize<Se: Serializer>(&self, s: Se) -> Result<Se::Ok, Se::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

label_enum!(
    /// Service domain. `General` carries only dialog-management acts.
    Domain, "domain", {
        Restaurant => "restaurant",
        Hotel => "hotel",
        Attraction => "attraction",
        General => "general",
    }
);

label_enum!(
    ActType, "act", {
        Inform => "inform",
        Request => "request",
        Propose => "propose",
        Book => "book",
        Bye => "bye",
    }
);

label_enum!(
    Slot, "slot", {
        Area => "area",
        Food => "food",
        Price => "price",
        Stars => "stars",
        Type => "type",
        Name => "name",
        Phone => "phone",
        Address => "address",
        Reference => "reference",
    }
);

impl Domain {
    /// Every slot the domain knows about, in canonical order.
    pub fn slots(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Domain::Restaurant => &[Area, Food, Price, Name, Phone, Reference],
            Domain::Hotel => &[Area, Price, Stars, Name, Phone, Reference],
            Domain::Attraction => &[Area, Type, Name, Phone, Address],
            Domain::General => &[],
        }
    }

    /// Slots a user constrains a search with.
    pub fn informable(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Domain::Restaurant => &[Area, Food, Price],
            Domain::Hotel => &[Area, Price, Stars],
            Domain::Attraction => &[Area, Type],
            Domain::General => &[],
        }
    }

    /// Slots a user may ask the system to provide.
    pub fn requestable(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Domain::Restaurant | Domain::Hotel => &[Phone, Reference],
            Domain::Attraction => &[Phone, Address],
            Domain::General => &[],
        }
    }

    /// Attributes stored for each database entity.
    pub fn attributes(self) -> Vec<Slot> {
        self.slots().iter().copied().filter(|s| *s != Slot::Reference).collect()
    }

    pub fn bookable(self) -> bool {
        self.slots().contains(&Slot::Reference)
    }

    pub fn has_slot(self, slot: Slot) -> bool {
        self.slots().contains(&slot)
    }

    /// Domains that hold database entities.
    pub fn services() -> &'static [Domain] {
        &[Domain::Restaurant, Domain::Hotel, Domain::Attraction]
    }
}

impl Slot {
    /// Delexicalization placeholder, e.g. `[value_phone]`.
    pub fn placeholder(self) -> String {
        format!("[value_{}]", self.as_str())
    }

    /// Inverse of [`Slot::placeholder`].
    pub fn from_placeholder(token: &str) -> Option<Slot> {
        token
            .strip_prefix("[value_")
            .and_then(|t| t.strip_suffix(']'))
            .and_then(|t| t.parse().ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_bounds() {
        assert_eq!(ActType::ALL.len(), 5);
        assert!(Domain::ALL.len() <= 4);
        assert!(Domain::ALL.iter().all(|d| d.slots().len() <= 6));
    }

    #[test]
    fn labels_round_trip_and_reject_unknown() {
        for s in Slot::ALL {
            assert_eq!(s.as_str().parse::<Slot>().unwrap(), *s);
            assert_eq!(Slot::from_placeholder(&s.placeholder()), Some(*s));
        }
        assert!("taxi".parse::<Domain>().is_err());
        assert!(Slot::from_placeholder("[value_colour]").is_none());
    }
}
