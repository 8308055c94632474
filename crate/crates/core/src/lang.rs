use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Short language code such as `en`, `hi`, or a pseudo-language `pl1`.
///
/// Always non-empty, lowercase and free of whitespace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(code: impl Into<String>) -> Result<Self, Error> {
        let code = code.into();
        if code.is_empty() {
            return Err(Error::config("language code is empty"));
        }
        if code.chars().any(char::is_whitespace) {
            return Err(Error::config(format!("language code {code:?} contains whitespace")));
        }
        if code.chars().any(char::is_uppercase) {
            return Err(Error::config(format!("language code {code:?} is not lowercase")));
        }
        Ok(LanguageId(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        LanguageId::new(s)
    }
}

impl TryFrom<String> for LanguageId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        LanguageId::new(s)
    }
}

impl From<LanguageId> for String {
    fn from(id: LanguageId) -> String {
        id.0
    }
}
