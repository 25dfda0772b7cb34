//! Small corpora compiled into the crate so every scenario runs offline.

/// News-style prose that keeps reusing names and phrases.
pub const REPETITIVE: &str = include_str!("../assets/repetitive.txt");
/// Python functions with heavily reused idioms.
pub const CODE: &str = include_str!("../assets/code.txt");
/// The words of [`REPETITIVE`] in shuffled order.
pub const SHUFFLED: &str = include_str!("../assets/shuffled.txt");

pub const NAMES: [&str; 3] = ["repetitive", "code", "shuffled"];

pub fn get(name: &str) -> Option<&'static str> {
    match name {
        "repetitive" => Some(REPETITIVE),
        "code" => Some(CODE),
        "shuffled" => Some(SHUFFLED),
        _ => None,
    }
}
