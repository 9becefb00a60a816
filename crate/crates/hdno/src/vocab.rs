use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{invalid, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Token table: reserved tokens first, then the corpus tokens in sorted order.
/// Line number in `vocab.txt` is the id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut extra: Vec<String> = tokens
            .into_iter()
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        extra.sort();
        extra.dedup();
        let all = RESERVED.iter().map(|s| s.to_string()).chain(extra).collect();
        Self::from_list(all)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return invalid(format!("{} does not start with the reserved tokens", path.display()));
        }
        Ok(Self::from_list(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_first_then_sorted() {
        let v = Vocab::from_tokens(["b".to_string(), "a".into(), "b".into(), EOS.into()]);
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.id("a"), 4);
    }
}
