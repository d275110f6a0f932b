/// Predicate deciding whether a generated caption counts as a success.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SuccessCriterion {
    /// The term's words occur contiguously, at word boundaries.
    #[default]
    Containment,
    /// The caption equals the full target prompt.
    ExactPrompt,
}

impl SuccessCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            SuccessCriterion::Containment => "containment",
            SuccessCriterion::ExactPrompt => "exact",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "containment" => Some(SuccessCriterion::Containment),
            "exact" => Some(SuccessCriterion::ExactPrompt),
            _ => None,
        }
    }
}

/// Lowercased words; any non-alphanumeric character is a boundary.
pub fn boundary_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whether `needle` occurs as a contiguous run of whole words in `haystack`.
pub fn contains_words(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

pub fn is_success(caption: &str, term: &str, criterion: SuccessCriterion) -> bool {
    let caption = boundary_words(caption);
    let term = boundary_words(term);
    match criterion {
        SuccessCriterion::Containment => contains_words(&caption, &term),
        SuccessCriterion::ExactPrompt => {
            let mut prompt = boundary_words("a picture of a");
            prompt.extend(term);
            caption == prompt
        }
    }
}
