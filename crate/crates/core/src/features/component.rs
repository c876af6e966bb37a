//! Surface-form component classes.

use std::fmt;

use ndarray::Array1;

pub const COMPONENT_DIM: usize = 8;
/// Slot used for empty strings and padding; never produced by [`classify_component`].
pub const RESERVED_SLOT: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComponentClass {
    AllNum,
    AllLower,
    AllUpper,
    UpperInit,
    MainNum,
    ContainNum,
    Other,
}

impl ComponentClass {
    pub const ALL: [ComponentClass; 7] = [
        ComponentClass::AllNum,
        ComponentClass::AllLower,
        ComponentClass::AllUpper,
        ComponentClass::UpperInit,
        ComponentClass::MainNum,
        ComponentClass::ContainNum,
        ComponentClass::Other,
    ];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> Array1<f64> {
        let mut v = Array1::zeros(COMPONENT_DIM);
        v[self.slot()] = 1.0;
        v
    }
}

impl fmt::Display for ComponentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ComponentClass::AllNum => "allNum",
            ComponentClass::AllLower => "allLower",
            ComponentClass::AllUpper => "allUpper",
            ComponentClass::UpperInit => "upperInit",
            ComponentClass::MainNum => "mainNum",
            ComponentClass::ContainNum => "containNum",
            ComponentClass::Other => "other",
        };
        f.write_str(s)
    }
}

/// First matching rule wins:
/// allNum, allUpper, allLower, upperInit, mainNum (> 50% digits), containNum, other.
pub fn classify_component(word: &str) -> ComponentClass {
    let total = word.chars().count();
    let digits = word.chars().filter(|c| c.is_numeric()).count();
    let alpha: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).collect();

    if total > 0 && digits == total {
        return ComponentClass::AllNum;
    }
    if digits == 0 && !alpha.is_empty() {
        if alpha.iter().all(|c| c.is_uppercase()) {
            return ComponentClass::AllUpper;
        }
        if alpha.iter().all(|c| c.is_lowercase()) {
            return ComponentClass::AllLower;
        }
        let mut chars = word.chars();
        let first_upper = chars.next().is_some_and(char::is_uppercase);
        if first_upper && chars.filter(|c| c.is_alphabetic()).all(char::is_lowercase) {
            return ComponentClass::UpperInit;
        }
    }
    if digits * 2 > total {
        return ComponentClass::MainNum;
    }
    if digits > 0 {
        return ComponentClass::ContainNum;
    }
    ComponentClass::Other
}

/// The 8-slot encoding; empty words map to the reserved slot.
pub fn component_one_hot(word: &str) -> Array1<f64> {
    if word.is_empty() {
        let mut v = Array1::zeros(COMPONENT_DIM);
        v[RESERVED_SLOT] = 1.0;
        return v;
    }
    classify_component(word).one_hot()
}
