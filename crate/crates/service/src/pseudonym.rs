//! Seeded random patient names for study mode.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;

use sepsis_core::seeding;

const FIRST: [&str; 40] = [
    "Alice", "Arthur", "Beatrice", "Calvin", "Clara", "Daniel", "Delia", "Edgar", "Elena", "Felix",
    "Frances", "George", "Grace", "Harold", "Helen", "Irene", "Isaac", "Jeffrey", "Joan",
    "Kenneth", "Laura", "Leonard", "Loretta", "Martin", "Miriam", "Nathan", "Nora", "Oscar",
    "Pauline", "Raymond", "Rosa", "Ruth", "Samuel", "Sylvia", "Thomas", "Ursula", "Victor",
    "Victoria", "Walter", "Yvonne",
];

const LAST: [&str; 40] = [
    "Abbott",
    "Barnes",
    "Bishop",
    "Carver",
    "Castillo",
    "Dalton",
    "Duarte",
    "Ellison",
    "Fischer",
    "Fleming",
    "Garner",
    "Hale",
    "Hensley",
    "Ingram",
    "Jensen",
    "Keller",
    "Lambert",
    "Lowell",
    "Marsh",
    "Medina",
    "Nolan",
    "Okafor",
    "Ortega",
    "Pearce",
    "Quinn",
    "Ramsey",
    "Reyes",
    "Sandoval",
    "Sato",
    "Thornton",
    "Underwood",
    "Vance",
    "Vargas",
    "Walsh",
    "Whitaker",
    "Yates",
    "Young",
    "Zamora",
    "Zeller",
    "Lindqvist",
];

/// A distinct name per patient id. The mapping depends only on the seed and
/// the set of ids; names repeat with a numeric suffix once the pool runs out.
pub fn assign(ids: &[String], seed: u64) -> HashMap<String, String> {
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut rng = seeding::stream(seed, 0);
    let mut used = HashSet::new();
    let mut out = HashMap::new();
    for id in sorted {
        let mut name = String::new();
        for attempt in 0.. {
            let base = format!(
                "{} {}",
                FIRST.choose(&mut rng).unwrap(),
                LAST.choose(&mut rng).unwrap()
            );
            name = if attempt < 20 {
                base
            } else {
                format!("{base} {}", attempt - 18)
            };
            if !used.contains(&name) {
                break;
            }
        }
        used.insert(name.clone());
        out.insert(id.clone(), name);
    }
    out
}
