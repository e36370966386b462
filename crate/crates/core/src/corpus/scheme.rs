use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label used for positions no loss may read (specials and padding).
pub const IGNORE_INDEX: i64 = -100;

/// BIO tagset over an ordered list of entity classes.
///
/// Tag layout: `O` is index 0, then `B-c`, `I-c` for each class in order, so
/// class `c` owns tags `2c+1` and `2c+2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    classes: Vec<String>,
}

impl LabelScheme {
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Result<Self> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if classes.is_empty() {
            return Err(Error::Config("label scheme needs at least one class".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.is_empty() || c == "O" || c.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid class name `{c}`")));
            }
            if classes[..i].contains(c) {
                return Err(Error::Config(format!("duplicate class `{c}`")));
            }
        }
        Ok(Self { classes })
    }

    /// Medicine, organ, disease, hormone, pharmacological class, common term.
    pub fn medical() -> Self {
        Self::new(["MED", "ORG", "DIS", "HOR", "PHA", "CMT"]).expect("valid")
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_tags(&self) -> usize {
        2 * self.classes.len() + 1
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn begin(&self, class: usize) -> usize {
        2 * class + 1
    }

    pub fn inside(&self, class: usize) -> usize {
        2 * class + 2
    }

    /// Entity class of a tag, `None` for `O`.
    pub fn class_of(&self, tag: usize) -> Option<usize> {
        (tag > 0 && tag < self.num_tags()).then(|| (tag - 1) / 2)
    }

    pub fn is_begin(&self, tag: usize) -> bool {
        tag > 0 && tag < self.num_tags() && tag % 2 == 1
    }

    pub fn is_inside(&self, tag: usize) -> bool {
        tag > 0 && tag < self.num_tags() && tag.is_multiple_of(2)
    }

    pub fn tag_name(&self, tag: usize) -> Option<String> {
        match tag {
            0 => Some("O".to_string()),
            t if t < self.num_tags() => {
                let c = &self.classes[(t - 1) / 2];
                Some(if t % 2 == 1 { format!("B-{c}") } else { format!("I-{c}") })
            }
            _ => None,
        }
    }

    pub fn tags(&self) -> Vec<String> {
        (0..self.num_tags())
            .map(|t| self.tag_name(t).expect("in range"))
            .collect()
    }

    pub fn tag_index(&self, name: &str) -> Option<usize> {
        if name == "O" {
            return Some(0);
        }
        let (prefix, class) = name.split_once('-')?;
        let c = self.class_index(class)?;
        match prefix {
            "B" => Some(self.begin(c)),
            "I" => Some(self.inside(c)),
            _ => None,
        }
    }

    /// Converts a stored label to a tag index, mapping [`IGNORE_INDEX`] to `None`.
    pub fn decode_label(&self, label: i64) -> Result<Option<usize>> {
        if label == IGNORE_INDEX {
            return Ok(None);
        }
        if label < 0 || label as usize >= self.num_tags() {
            return Err(Error::Validation(format!("label {label} outside the tagset")));
        }
        Ok(Some(label as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medical_scheme_has_thirteen_tags() {
        let s = LabelScheme::medical();
        assert_eq!(s.num_tags(), 13);
        assert_eq!(s.tag_name(0).unwrap(), "O");
        assert_eq!(s.tags()[1], "B-MED");
        assert_eq!(s.tags()[12], "I-CMT");
        assert!(IGNORE_INDEX < 0 || IGNORE_INDEX as usize >= s.num_tags());
    }

    #[test]
    fn tag_names_round_trip() {
        let s = LabelScheme::medical();
        for (i, t) in s.tags().iter().enumerate() {
            assert_eq!(s.tag_index(t), Some(i));
        }
        assert_eq!(s.tag_index("B-XYZ"), None);
        assert_eq!(s.class_of(s.inside(3)), Some(3));
        assert_eq!(s.class_of(0), None);
    }

    #[test]
    fn rejects_bad_class_lists() {
        assert!(LabelScheme::new(Vec::<String>::new()).is_err());
        assert!(LabelScheme::new(["A", "A"]).is_err());
        assert!(LabelScheme::new(["O"]).is_err());
    }

    #[test]
    fn decode_label_handles_ignore() {
        let s = LabelScheme::new(["X"]).unwrap();
        assert_eq!(s.decode_label(IGNORE_INDEX).unwrap(), None);
        assert_eq!(s.decode_label(2).unwrap(), Some(2));
        assert!(s.decode_label(3).is_err());
    }
}
