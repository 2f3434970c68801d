use super::record::AuthorRecord;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

/// Positions `[start, end)` of one document's tokens inside a block
/// (the trailing separator is not part of the span).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DocSpan {
    pub doc_index: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Exactly `block_len` ids; padded positions hold 0.
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub spans: Vec<DocSpan>,
}

impl Block {
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Index of the last non-padded position.
    pub fn last_valid(&self) -> Option<usize> {
        self.mask.iter().rposition(|&m| m)
    }
}

/// An author's documents tokenized, separated and chunked into blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSequence {
    pub author_id: String,
    pub blocks: Vec<Block>,
    pub non_padded_block_count: usize,
    /// Tokens dropped from the front to respect `max_blocks`.
    pub truncated_tokens: usize,
    pub separator: usize,
}

impl BlockSequence {
    /// All non-padded tokens in order.
    pub fn tokens(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .flat_map(|b| b.tokens.iter().zip(&b.mask).filter(|(_, &m)| m).map(|(&t, _)| t))
            .collect()
    }

    /// Splits the kept token stream at separators and decodes each piece.
    pub fn decode_documents(&self, tokenizer: &dyn Tokenizer) -> Result<Vec<String>> {
        let toks = self.tokens();
        let mut docs = Vec::new();
        let mut cur = Vec::new();
        for t in toks {
            if t == self.separator {
                docs.push(tokenizer.decode(&cur)?);
                cur.clear();
            } else {
                cur.push(t);
            }
        }
        if !cur.is_empty() {
            docs.push(tokenizer.decode(&cur)?);
        }
        Ok(docs)
    }

    /// Document indices that contribute at least one token.
    pub fn document_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.blocks.iter().flat_map(|b| b.spans.iter().map(|s| s.doc_index)).collect();
        out.dedup();
        out
    }
}

/// Tokenizes an author's documents in temporal order, appending a separator
/// after each, and chunks the stream into right-padded blocks. When the
/// stream needs more than `max_blocks` blocks only its most recent
/// `max_blocks · block_len` tokens are kept.
///
/// With `anchor = Some(i)`, the history is restricted to documents strictly
/// earlier than document `i`, and document `i` is appended last.
pub fn build_blocks(
    author: &AuthorRecord,
    tokenizer: &dyn Tokenizer,
    block_len: usize,
    max_blocks: usize,
    anchor: Option<usize>,
) -> Result<BlockSequence> {
    if block_len == 0 || max_blocks == 0 {
        return Err(Error::config("block_len and max_blocks must be positive"));
    }
    let selected: Vec<usize> = match anchor {
        None => (0..author.documents.len()).collect(),
        Some(a) => {
            let anchor_doc = author.documents.get(a).ok_or_else(|| {
                Error::data(format!(
                    "anchor document {a} not in author {:?} ({} documents)",
                    author.author_id,
                    author.documents.len()
                ))
            })?;
            let mut idx: Vec<usize> = (0..author.documents.len())
                .filter(|&i| author.documents[i].timestamp < anchor_doc.timestamp)
                .collect();
            idx.push(a);
            idx
        }
    };

    let sep = tokenizer.separator();
    // (token, owning document, is separator)
    let mut stream: Vec<(usize, usize, bool)> = Vec::new();
    for &di in &selected {
        for t in tokenizer.encode(&author.documents[di].text)? {
            stream.push((t, di, false));
        }
        stream.push((sep, di, true));
    }
    let cap = block_len * max_blocks;
    let truncated = stream.len().saturating_sub(cap);
    let kept = &stream[truncated..];

    let blocks: Vec<Block> = kept
        .chunks(block_len)
        .map(|chunk| {
            let mut tokens = vec![0; block_len];
            let mut mask = vec![false; block_len];
            let mut spans: Vec<DocSpan> = Vec::new();
            for (pos, &(tok, doc, is_sep)) in chunk.iter().enumerate() {
                tokens[pos] = tok;
                mask[pos] = true;
                if is_sep {
                    continue;
                }
                match spans.last_mut() {
                    Some(s) if s.doc_index == doc && s.end == pos => s.end = pos + 1,
                    _ => spans.push(DocSpan {
                        doc_index: doc,
                        start: pos,
                        end: pos + 1,
                    }),
                }
            }
            Block { tokens, mask, spans }
        })
        .collect();
    Ok(BlockSequence {
        author_id: author.author_id.clone(),
        non_padded_block_count: blocks.len(),
        blocks,
        truncated_tokens: truncated,
        separator: sep,
    })
}
