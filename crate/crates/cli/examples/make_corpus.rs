//! Writes the bundled 2-class review corpus and its paraphrase table.
//!
//! Usage: `cargo run -p coda-cli --example make_corpus -- [OUT_DIR] [SEED]`

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POSITIVE: &[&[&str]] = &[
    &["good", "fine", "decent", "solid"],
    &["great", "superb", "excellent", "terrific"],
    &["enjoyable", "fun", "delightful", "pleasant"],
    &["moving", "touching", "heartfelt", "poignant"],
    &["clever", "witty", "smart", "sharp"],
    &["beautiful", "gorgeous", "lovely", "stunning"],
    &["gripping", "riveting", "engrossing", "absorbing"],
    &["funny", "hilarious", "amusing", "comic"],
    &["charming", "endearing", "sweet", "winsome"],
    &["memorable", "striking", "remarkable", "notable"],
    &["fresh", "original", "inventive", "novel"],
    &["strong", "powerful", "compelling", "forceful"],
];

const NEGATIVE: &[&[&str]] = &[
    &["bad", "poor", "weak", "lousy"],
    &["awful", "terrible", "dreadful", "atrocious"],
    &["boring", "dull", "tedious", "tiresome"],
    &["silly", "foolish", "inane", "daft"],
    &["ugly", "drab", "murky", "garish"],
    &["confusing", "muddled", "messy", "incoherent"],
    &["slow", "sluggish", "plodding", "lethargic"],
    &["bland", "flat", "lifeless", "limp"],
    &["predictable", "formulaic", "stale", "trite"],
    &["annoying", "grating", "irritating", "galling"],
    &["clumsy", "awkward", "inept", "sloppy"],
    &["forgettable", "hollow", "empty", "vapid"],
];

const SUBJECTS: &[&[&str]] = &[&["movie", "film", "picture", "feature"]];

const NOUNS: &[&[&str]] = &[
    &["plot", "story", "storyline", "narrative"],
    &["acting", "performances", "cast", "ensemble"],
    &["script", "writing", "screenplay", "dialogue"],
    &["score", "music", "soundtrack", "songs"],
    &["ending", "finale", "climax", "conclusion"],
    &["pacing", "rhythm", "tempo", "flow"],
    &["direction", "staging", "filmmaking", "craft"],
    &["visuals", "photography", "imagery", "cinematography"],
];

const INTENSIFIERS: &[&[&str]] = &[&["really", "truly", "genuinely", "quite"], &["very", "so", "rather", "pretty"]];

/// Original templates paired with a reworded form used for the paraphrase table, so that
/// paraphrases carry the phrasing drift of a round-trip translation.
const TEMPLATES: &[(&str, &str)] = &[
    ("the {n} was {a}", "i would say that the {n} is {a}"),
    ("a {a} {s} with a {b} {n}", "this is a {a} {s} , and its {n} is {b}"),
    ("the {s} is {i} {a} and the {n} is {b}", "it is a {i} {a} {s} , and the {n} seems {b} too"),
    ("i thought the {n} felt {a}", "in my opinion the {n} was {a}"),
    ("overall a {i} {a} {s}", "all in all , it is a {i} {a} {s}"),
    ("{a} {n} , {b} {m} , {c} {s}", "the {n} is {a} , the {m} is {b} and the {s} is {c}"),
    ("the {n} and the {m} were both {a}", "both the {n} and the {m} are {a}"),
    ("what a {a} {s} , the {n} is {i} {b}", "it is such a {a} {s} and its {n} is {i} {b}"),
    ("this {s} has a {a} {n} but a {x} {m}", "the {n} in this {s} is {a} , although the {m} is {x}"),
    ("{i} {a} from start to finish", "it is {i} {a} from the beginning to the end"),
];

/// A template with each `{tag}` bound to a synonym group and a chosen form.
struct Sentence {
    template: usize,
    fills: Vec<(&'static str, &'static [&'static str], usize)>,
}

impl Sentence {
    fn fill(&self, pattern: &str, picks: &[usize]) -> String {
        pattern
            .split(' ')
            .map(|w| {
                self.fills
                    .iter()
                    .zip(picks)
                    .find(|((tag, _, _), _)| *tag == w)
                    .map_or(w, |((_, group, _), &i)| group[i])
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn render(&self) -> String {
        let picks: Vec<usize> = self.fills.iter().map(|f| f.2).collect();
        self.fill(TEMPLATES[self.template].0, &picks)
    }

    /// Rewords the template and re-draws every filled word with a different synonym.
    fn paraphrase(&self, rng: &mut impl Rng) -> String {
        let picks: Vec<usize> = self
            .fills
            .iter()
            .map(|(_, g, i)| (i + rng.random_range(1..g.len())) % g.len())
            .collect();
        self.fill(TEMPLATES[self.template].1, &picks)
    }
}

fn draw(rng: &mut impl Rng, label: usize) -> Sentence {
    let (own, other) = if label == 1 { (POSITIVE, NEGATIVE) } else { (NEGATIVE, POSITIVE) };
    let template = rng.random_range(0..TEMPLATES.len());
    let mut nouns = NOUNS.to_vec();
    let mut fills = Vec::new();
    for tag in TEMPLATES[template].0.split(' ').filter(|w| w.starts_with('{')) {
        let group: &'static [&'static str] = match tag {
            "{x}" => other.choose(rng).unwrap(),
            "{s}" => SUBJECTS[0],
            "{i}" => INTENSIFIERS.choose(rng).unwrap(),
            "{n}" | "{m}" => nouns.swap_remove(rng.random_range(0..nouns.len())),
            _ => own.choose(rng).unwrap(),
        };
        fills.push((tag, group, rng.random_range(0..group.len())));
    }
    Sentence { template, fills }
}

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(2021);
    let label_noise = 0.05;
    fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut write_split = |name: &str, n: usize, paraphrases: Option<&mut Vec<(String, String)>>| {
        let mut lines = Vec::with_capacity(n);
        let mut pairs = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let sentence = draw(&mut rng, label);
            let text = sentence.render();
            let shown = if rng.random_bool(label_noise) { 1 - label } else { label };
            pairs.push((text.clone(), sentence.paraphrase(&mut rng)));
            lines.push(format!("{text}\t{shown}"));
        }
        if let Some(p) = paraphrases {
            p.extend(pairs);
        }
        fs::write(out.join(name), lines.join("\n") + "\n")
    };

    let mut table = Vec::new();
    write_split("train.tsv", 2000, Some(&mut table))?;
    write_split("dev.tsv", 1000, None)?;

    let mut seen = std::collections::HashSet::new();
    let mut f = fs::File::create(out.join("paraphrases.tsv"))?;
    for (src, para) in table {
        if seen.insert(src.clone()) {
            writeln!(f, "{src}\t{para}")?;
        }
    }
    Ok(())
}
