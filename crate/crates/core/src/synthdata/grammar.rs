//! Templated referring-expression grammar and its evaluator.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Cyan,
    Color::Magenta,
    Color::Orange,
    Color::White,
];
pub const SIZES: [Size; 2] = [Size::Small, Size::Large];
pub const RELATIONS: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

/// Token strings; index = token id. Id 0 is padding.
pub const VOCAB: [&str; 20] = [
    "<pad>", "the", "small", "large", "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white",
    "circle", "square", "triangle", "left", "right", "of", "above", "below",
];

pub const MAX_TOKENS: usize = 16;

pub fn token_id(word: &str) -> Option<u32> {
    VOCAB.iter().position(|w| *w == word).map(|i| i as u32)
}

fn tid(word: &str) -> u32 {
    token_id(word).expect("word in vocabulary")
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.1],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Cyan => [0.1, 0.9, 0.9],
            Color::Magenta => [0.9, 0.1, 0.9],
            Color::Orange => [1.0, 0.55, 0.05],
            Color::White => [0.95, 0.95, 0.95],
        }
    }
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

impl Relation {
    fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether `subject` (pixel corners) stands in this relation to `landmark`.
    pub fn holds(self, subject: [u32; 4], landmark: [u32; 4]) -> bool {
        match self {
            Relation::LeftOf => subject[2] <= landmark[0],
            Relation::RightOf => subject[0] >= landmark[2],
            Relation::Above => subject[3] <= landmark[1],
            Relation::Below => subject[1] >= landmark[3],
        }
    }
}

/// Attributes an expression can test.
pub trait Attributes {
    fn shape(&self) -> Shape;
    fn color(&self) -> Color;
    fn size(&self) -> Size;
    fn pixel_box(&self) -> [u32; 4];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub shape: Shape,
}

impl Descriptor {
    pub fn matches<A: Attributes>(&self, o: &A) -> bool {
        o.shape() == self.shape
            && self.size.is_none_or(|s| s == o.size())
            && self.color.is_none_or(|c| c == o.color())
    }

    /// Every descriptor that matches `o`, from least to most specific.
    pub fn all_for<A: Attributes>(o: &A) -> [Descriptor; 4] {
        let shape = o.shape();
        [
            Descriptor { size: None, color: None, shape },
            Descriptor { size: None, color: Some(o.color()), shape },
            Descriptor { size: Some(o.size()), color: None, shape },
            Descriptor { size: Some(o.size()), color: Some(o.color()), shape },
        ]
    }

    fn push_tokens(&self, article: bool, out: &mut Vec<u32>) {
        if article {
            out.push(tid("the"));
        }
        if let Some(s) = self.size {
            out.push(tid(s.word()));
        }
        if let Some(c) = self.color {
            out.push(tid(c.word()));
        }
        out.push(tid(self.shape.word()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub article: bool,
    pub subject: Descriptor,
    pub relation: Option<(Relation, Descriptor)>,
}

impl Expression {
    pub fn tokens(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.subject.push_tokens(self.article, &mut out);
        if let Some((rel, landmark)) = &self.relation {
            out.extend(rel.words().iter().map(|w| tid(w)));
            landmark.push_tokens(self.article, &mut out);
        }
        out
    }

    /// Indices of objects satisfying the expression. A relational expression
    /// needs its landmark descriptor to pick out exactly one object.
    pub fn satisfying<A: Attributes>(&self, objects: &[A]) -> Vec<usize> {
        let landmark = match &self.relation {
            None => None,
            Some((rel, desc)) => {
                let hits: Vec<usize> = (0..objects.len()).filter(|&i| desc.matches(&objects[i])).collect();
                if hits.len() != 1 {
                    return Vec::new();
                }
                Some((*rel, hits[0]))
            }
        };
        (0..objects.len())
            .filter(|&i| self.subject.matches(&objects[i]))
            .filter(|&i| match landmark {
                None => true,
                Some((rel, l)) => l != i && rel.holds(objects[i].pixel_box(), objects[l].pixel_box()),
            })
            .collect()
    }
}

pub fn detokenize(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| VOCAB.get(t as usize).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}
