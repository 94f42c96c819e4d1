//! Seeded synthetic conversations over a small vocabulary, so persona size
//! stays bounded however many turns are generated.
#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};
use mnemo_core::{Engine, EngineConfig, HashedBowEmbedder, Role, RuleBasedAnalyzer, UserMemory};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VERBS: [&str; 8] = ["visited", "cooked", "painted", "bought", "watched", "read", "fixed", "planned"];
pub const LIKES: [&str; 3] = ["love", "enjoy", "hate"];
pub const NOUNS: [&str; 40] = [
    "museum", "pasta", "fence", "bicycle", "movie", "novel", "garden", "trip", "guitar", "camera", "lake",
    "bakery", "marathon", "concert", "kitchen", "puzzle", "sunset", "library", "market", "festival", "canoe",
    "orchard", "castle", "beach", "theater", "podcast", "recipe", "sweater", "lantern", "telescope", "violin",
    "harbor", "meadow", "bridge", "tram", "island", "forest", "studio", "glacier", "village",
];
pub const OPENERS: [&str; 8] = [
    "Yesterday", "After dinner", "On Sunday", "Last night", "This morning", "Today", "Finally", "Once more",
];
pub const ADJECTIVES: [&str; 5] = ["new", "broken", "huge", "quiet", "red"];

pub fn engine() -> Engine {
    Engine::new(EngineConfig::default(), Arc::new(RuleBasedAnalyzer::new()), Arc::new(HashedBowEmbedder::default()))
        .expect("default config is valid")
}

pub fn sentence(rng: &mut impl Rng) -> String {
    let noun = NOUNS.choose(rng).unwrap();
    let opener = OPENERS.choose(rng).unwrap();
    match rng.gen_range(0..10) {
        0..=5 => format!("{opener} I {} the {noun}.", VERBS.choose(rng).unwrap()),
        6..=7 => format!("I {} the {noun}.", LIKES.choose(rng).unwrap()),
        8 => format!("My {noun} is {}.", ADJECTIVES.choose(rng).unwrap()),
        _ => format!("{opener} the {noun} looked like a {}.", NOUNS.choose(rng).unwrap()),
    }
}

pub fn query(rng: &mut impl Rng) -> String {
    format!("what about the {} {}", NOUNS.choose(rng).unwrap(), NOUNS.choose(rng).unwrap())
}

pub fn start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap()
}

/// Encodes `turns` turns; every fifth one is an assistant reply.
pub fn memory(engine: &Engine, seed: u64, turns: usize) -> UserMemory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mem = UserMemory::new(&format!("user{seed}")).unwrap();
    for i in 0..turns {
        let role = if i % 5 == 4 { Role::Assistant } else { Role::User };
        let text = sentence(&mut rng);
        let session = format!("s{}", i / 20);
        engine
            .encode_interaction(&mut mem, role, &text, start() + Duration::minutes(i as i64), Some(session))
            .unwrap();
    }
    mem
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
