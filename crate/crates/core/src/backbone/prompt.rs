//! Hard prompts and the word-level tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataset::{ItemCatalog, ItemId};
use crate::error::{Error, Result};

pub const TITLES_PLACEHOLDER: &str = "{titles}";

pub const DEFAULT_TEMPLATE: &str =
    "Recommend the next product for this user based on their purchase history: {titles}";

pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Prompt text with a `{titles}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if !text.contains(TITLES_PLACEHOLDER) {
            return Err(Error::Config(format!(
                "prompt template lacks the {TITLES_PLACEHOLDER} placeholder"
            )));
        }
        Ok(PromptTemplate { text })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(fs::read_to_string(path)?.trim_end().to_string())
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Renders the template with the comma-joined titles of `prefix`.
    pub fn render(&self, prefix: &[ItemId], catalog: &ItemCatalog) -> Result<String> {
        if prefix.is_empty() {
            return Err(Error::Contract(
                "hard prompt needs a non-empty history".into(),
            ));
        }
        let titles = prefix
            .iter()
            .map(|&i| catalog.title(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.text.replace(TITLES_PLACEHOLDER, &titles.join(", ")))
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            text: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardPrompt {
    pub text: String,
    pub token_ids: Vec<usize>,
}

pub fn build_hard_prompt(
    prefix: &[ItemId],
    catalog: &ItemCatalog,
    template: &PromptTemplate,
    vocab: &Vocabulary,
) -> Result<HardPrompt> {
    let text = template.render(prefix, catalog)?;
    let token_ids = vocab.tokenize(&text);
    Ok(HardPrompt { text, token_ids })
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '-' | '_' | '\'')
}

/// Lower-cased word-level split: runs of alphanumerics (plus `-`, `_`, `'`)
/// form words; every other non-space character is a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_word_char(c) {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from `texts`; ids follow first appearance, after
    /// the unknown token at id 0.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.insert(UNK_TOKEN.to_string());
        for text in texts {
            for tok in split_words(text) {
                vocab.insert(tok);
            }
        }
        vocab
    }

    /// Vocabulary covering the template's directive and every catalog title.
    pub fn for_corpus(catalog: &ItemCatalog, template: &PromptTemplate) -> Self {
        let directive = template.text().replace(TITLES_PLACEHOLDER, " , ");
        let texts = std::iter::once(directive.as_str())
            .chain(catalog.titles().iter().map(String::as_str))
            .collect::<Vec<_>>();
        Self::build(texts)
    }

    fn insert(&mut self, tok: String) {
        if !self.index.contains_key(&tok) {
            self.index.insert(tok.clone(), self.tokens.len());
            self.tokens.push(tok);
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Config(format!(
                "vocabulary must start with {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "invalid vocabulary token {t:?} at line {}",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or(UNK_TOKEN, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}
