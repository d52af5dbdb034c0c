//! Raw-label dictionary and the outbound privacy scan.
//!
//! The dictionary holds every raw surface string of the session that must
//! not cross the remote channel: entity labels always, relation labels when
//! relations run in privacy mode. Labels shorter than four characters are
//! exempt (they are indistinguishable from ordinary words) and recorded so
//! callers can log the exemption once.

const MIN_SCAN_LEN: usize = 4;

/// Session dictionary of protected raw labels.
#[derive(Debug, Clone, Default)]
pub struct RawDictionary {
    entries: Vec<String>,
    exempt_short: Vec<String>,
}

impl RawDictionary {
    pub fn new<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let mut dict = Self::default();
        for label in labels {
            dict.insert(label);
        }
        dict
    }

    pub fn insert(&mut self, label: String) {
        let lowered = label.to_lowercase();
        if lowered.chars().count() < MIN_SCAN_LEN {
            if !self.exempt_short.contains(&lowered) {
                self.exempt_short.push(lowered);
            }
        } else if !self.entries.contains(&lowered) {
            self.entries.push(lowered);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Labels too short to scan, kept for warning logs.
    pub fn exempted(&self) -> &[String] {
        &self.exempt_short
    }

    /// Returns the first protected label that occurs word-bounded and
    /// case-insensitively in `text`, if any.
    pub fn scan(&self, text: &str) -> Option<&str> {
        let lowered = text.to_lowercase();
        self.entries
            .iter()
            .find(|entry| contains_word_bounded(&lowered, entry))
            .map(String::as_str)
    }

    /// Scans a batch of strings; `None` means all are clean.
    pub fn scan_all<'a, I: IntoIterator<Item = &'a str>>(&self, texts: I) -> Option<&str> {
        texts.into_iter().find_map(|t| self.scan(t))
    }
}

/// Word-bounded substring test over pre-lowercased haystack/needle.
fn contains_word_bounded(haystack: &str, needle: &str) -> bool {
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let left_ok = start == 0
            || !haystack[..start]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
        let right_ok = end == haystack.len()
            || !haystack[end..].chars().next().is_some_and(|c| c.is_alphanumeric());
        if left_ok && right_ok {
            return true;
        }
        from = start + 1;
        if from >= haystack.len() {
            break;
        }
    }
    false
}
