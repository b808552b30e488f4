//! Fixed token vocabulary shared by the environment and the policy.
//!
//! Layout (version [`VOCAB_VERSION`]):
//!
//! | ids      | meaning                                  |
//! |----------|------------------------------------------|
//! | 0        | PAD (left padding inside the window)     |
//! | 1..=9    | structural delimiters and instructions   |
//! | 10..=12  | operation codes `+`, `-`, `*`            |
//! | 13..=28  | digits `0..16`                           |
//! | 29..=36  | diversity-instruction variants `0..8`    |

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

pub const VOCAB_VERSION: &str = "toyvocab-v1";

/// Largest modulus the vocabulary can encode.
pub const MAX_MODULUS: u32 = 16;
/// Number of diversity-instruction tokens available.
pub const MAX_VARIANTS: usize = 8;

const OP_BASE: u16 = 10;
const DIGIT_BASE: u16 = 13;
const VARIANT_BASE: u16 = DIGIT_BASE + MAX_MODULUS as u16;

pub const VOCAB_SIZE: usize = VARIANT_BASE as usize + MAX_VARIANTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub const PAD: Token = Token(0);
    pub const QUESTION: Token = Token(1);
    pub const TIPS: Token = Token(2);
    pub const SUBQ_OPEN: Token = Token(3);
    pub const SUBQ_CLOSE: Token = Token(4);
    pub const ANSWER: Token = Token(5);
    pub const EOS: Token = Token(6);
    pub const EQ: Token = Token(7);
    pub const INSTR_REASON: Token = Token(8);
    pub const INSTR_DECOMPOSE: Token = Token(9);

    pub fn op(op: Op) -> Token {
        Token(OP_BASE + op as u16)
    }

    pub fn digit(value: u32) -> Token {
        assert!(value < MAX_MODULUS, "digit {value} outside vocabulary");
        Token(DIGIT_BASE + value as u16)
    }

    pub fn variant(v: usize) -> Token {
        assert!(v < MAX_VARIANTS, "variant {v} outside vocabulary");
        Token(VARIANT_BASE + v as u16)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn checked(id: u16) -> Result<Token> {
        if (id as usize) < VOCAB_SIZE {
            Ok(Token(id))
        } else {
            Err(Error::UnknownToken(id))
        }
    }

    pub fn as_digit(self) -> Option<u32> {
        (DIGIT_BASE..VARIANT_BASE)
            .contains(&self.0)
            .then(|| (self.0 - DIGIT_BASE) as u32)
    }

    pub fn as_op(self) -> Option<Op> {
        match self.0.checked_sub(OP_BASE)? {
            0 => Some(Op::Add),
            1 => Some(Op::Sub),
            2 => Some(Op::Mul),
            _ => None,
        }
    }

    pub fn as_variant(self) -> Option<usize> {
        (VARIANT_BASE..VOCAB_SIZE as u16)
            .contains(&self.0)
            .then(|| (self.0 - VARIANT_BASE) as usize)
    }

    /// Text rendering used for character-count format rules.
    pub fn text(self) -> String {
        if let Some(d) = self.as_digit() {
            return d.to_string();
        }
        if let Some(op) = self.as_op() {
            return op.symbol().to_string();
        }
        if let Some(v) = self.as_variant() {
            return format!("[explore-{v}]");
        }
        match self {
            Token::PAD | Token::EOS => String::new(),
            Token::QUESTION => "Q:".into(),
            Token::TIPS => "Tips:".into(),
            Token::SUBQ_OPEN => "<sq>".into(),
            Token::SUBQ_CLOSE => "</sq>".into(),
            Token::ANSWER => "\\boxed".into(),
            Token::EQ => "=".into(),
            Token::INSTR_REASON => "[reason]".into(),
            Token::INSTR_DECOMPOSE => "[decompose]".into(),
            _ => unreachable!("every id below VOCAB_SIZE is classified"),
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::PAD => f.write_str("<pad>"),
            Token::EOS => f.write_str("<eos>"),
            t => f.write_str(&t.text()),
        }
    }
}

/// Concatenated text of a token sequence (no separators).
pub fn render_text(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.text()).collect()
}

/// Space-separated debug rendering.
pub fn display(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add = 0,
    Sub = 1,
    Mul = 2,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn apply(self, value: u32, operand: u32, modulus: u32) -> u32 {
        let (v, k, m) = (value as u64, operand as u64, modulus as u64);
        let out = match self {
            Op::Add => (v + k) % m,
            Op::Sub => (v + m - k % m) % m,
            Op::Mul => (v * k) % m,
        };
        out as u32
    }

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }
}
