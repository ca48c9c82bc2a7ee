//! Template caption grammar. Captions are a pure function of the scene's
//! template, lane count, non-ego vehicle count, pedestrian presence and
//! domain tag — and parse back to exactly that tuple.

use super::generate::{infer_template, TemplateKind};
use super::vocab::Vocab;
use super::PromptTokens;
use crate::error::{Error, Result};
use crate::scene::{AgentClass, DomainTag, SceneGraph};

/// The attributes a caption encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionFacts {
    pub template: TemplateKind,
    pub lane_count: usize,
    /// Non-ego, non-pedestrian agents ("vehicles" in the caption).
    pub vehicle_count: usize,
    pub pedestrians: bool,
    pub domain: DomainTag,
}

impl CaptionFacts {
    pub fn of_scene(scene: &SceneGraph) -> CaptionFacts {
        let vehicle_count = scene
            .agents
            .iter()
            .skip(1)
            .filter(|a| a.class != AgentClass::Pedestrian)
            .count();
        let pedestrians = scene
            .agents
            .iter()
            .any(|a| a.class == AgentClass::Pedestrian);
        CaptionFacts {
            template: infer_template(scene),
            lane_count: scene.n_lanes(),
            vehicle_count,
            pedestrians,
            domain: scene.domain,
        }
    }

    pub fn text(&self) -> Result<String> {
        let lanes = Vocab::number_word(self.lane_count)?;
        let lane_word = if self.lane_count == 1 { "lane" } else { "lanes" };
        let head = match self.template {
            TemplateKind::Straight => format!("{lanes} lane straight road"),
            TemplateKind::Curved => format!("curved road with {lanes} {lane_word}"),
            TemplateKind::TJunction => format!("t intersection with {lanes} {lane_word}"),
            TemplateKind::FourWay => format!("four way intersection with {lanes} {lane_word}"),
        };
        let v = Vocab::number_word(self.vehicle_count)?;
        let v_word = if self.vehicle_count == 1 { "vehicle" } else { "vehicles" };
        let ped = if self.pedestrians { " and pedestrians" } else { "" };
        Ok(format!(
            "{head} and {v} {v_word}{ped} in {}",
            self.domain.word()
        ))
    }
}

/// Tokenized caption for a scene. Deterministic; injective up to
/// [`CaptionFacts`].
pub fn caption_scene(scene: &SceneGraph, vocab: &Vocab) -> Result<PromptTokens> {
    let facts = CaptionFacts::of_scene(scene);
    let ids = vocab.encode(&facts.text()?)?;
    let tokens = PromptTokens { ids };
    tokens.validate(vocab.len())?;
    Ok(tokens)
}

/// Parse a caption back through the grammar.
pub fn parse_caption(tokens: &PromptTokens, vocab: &Vocab) -> Result<CaptionFacts> {
    let text = vocab.decode(&tokens.ids)?;
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut i = 0usize;
    let next = |i: &mut usize| -> Result<&str> {
        let w = words
            .get(*i)
            .copied()
            .ok_or_else(|| Error::Input(format!("caption truncated: {text:?}")))?;
        *i += 1;
        Ok(w)
    };
    let expect = |i: &mut usize, want: &str| -> Result<()> {
        let w = next(i)?;
        if w != want {
            return Err(Error::Input(format!(
                "caption grammar: expected {want:?}, got {w:?} in {text:?}"
            )));
        }
        Ok(())
    };

    let first = next(&mut i)?;
    let (template, lane_count) = match first {
        "curved" | "t" | "four" => {
            let template = match first {
                "curved" => {
                    expect(&mut i, "road")?;
                    TemplateKind::Curved
                }
                "t" => {
                    expect(&mut i, "intersection")?;
                    TemplateKind::TJunction
                }
                _ => {
                    expect(&mut i, "way")?;
                    expect(&mut i, "intersection")?;
                    TemplateKind::FourWay
                }
            };
            expect(&mut i, "with")?;
            let n = Vocab::parse_number(next(&mut i)?)
                .ok_or_else(|| Error::Input(format!("caption lane count missing: {text:?}")))?;
            let w = next(&mut i)?;
            if w != "lane" && w != "lanes" {
                return Err(Error::Input(format!("caption grammar: {text:?}")));
            }
            (template, n)
        }
        w => {
            let n = Vocab::parse_number(w)
                .ok_or_else(|| Error::Input(format!("caption grammar: {text:?}")))?;
            expect(&mut i, "lane")?;
            expect(&mut i, "straight")?;
            expect(&mut i, "road")?;
            (TemplateKind::Straight, n)
        }
    };

    expect(&mut i, "and")?;
    let vehicle_count = Vocab::parse_number(next(&mut i)?)
        .ok_or_else(|| Error::Input(format!("caption vehicle count missing: {text:?}")))?;
    let w = next(&mut i)?;
    if w != "vehicle" && w != "vehicles" {
        return Err(Error::Input(format!("caption grammar: {text:?}")));
    }

    let mut pedestrians = false;
    let mut w = next(&mut i)?;
    if w == "and" {
        expect(&mut i, "pedestrians")?;
        pedestrians = true;
        w = next(&mut i)?;
    }
    if w != "in" {
        return Err(Error::Input(format!("caption grammar: {text:?}")));
    }
    let domain = match next(&mut i)? {
        "metro" => DomainTag::Metro,
        "suburb" => DomainTag::Suburb,
        other => return Err(Error::Input(format!("unknown domain word {other:?}"))),
    };
    if i != words.len() {
        return Err(Error::Input(format!("trailing caption words: {text:?}")));
    }
    Ok(CaptionFacts {
        template,
        lane_count,
        vehicle_count,
        pedestrians,
        domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_scene, CorpusParams};
    use crate::scene::{crop_scene, LayoutKind};

    #[test]
    fn four_way_five_vehicles_phrase() {
        let facts = CaptionFacts {
            template: TemplateKind::FourWay,
            lane_count: 7,
            vehicle_count: 5,
            pedestrians: false,
            domain: DomainTag::Metro,
        };
        let text = facts.text().unwrap();
        assert!(text.starts_with("four way intersection"));
        assert!(text.contains("five vehicles"));
    }

    #[test]
    fn caption_is_deterministic_and_faithful() {
        let vocab = Vocab::new();
        let params = CorpusParams::default();
        for seed in 0..25 {
            let scene = generate_scene(seed, &params).unwrap();
            let crop = crop_scene(&scene, LayoutKind::EgoCentered).unwrap();
            let t1 = caption_scene(&crop, &vocab).unwrap();
            let t2 = caption_scene(&crop, &vocab).unwrap();
            assert_eq!(t1, t2);
            let parsed = parse_caption(&t1, &vocab).unwrap();
            let facts = CaptionFacts::of_scene(&crop);
            assert_eq!(parsed, facts, "seed {seed}");
        }
    }

    #[test]
    fn differing_counts_differ_only_in_count_tokens() {
        let vocab = Vocab::new();
        let a = CaptionFacts {
            template: TemplateKind::Straight,
            lane_count: 2,
            vehicle_count: 3,
            pedestrians: false,
            domain: DomainTag::Suburb,
        };
        let b = CaptionFacts {
            vehicle_count: 7,
            ..a
        };
        let ta = vocab.encode(&a.text().unwrap()).unwrap();
        let tb = vocab.encode(&b.text().unwrap()).unwrap();
        assert_eq!(ta.len(), tb.len());
        let diffs: Vec<usize> = (0..ta.len()).filter(|&i| ta[i] != tb[i]).collect();
        assert_eq!(diffs.len(), 1);
        assert_eq!(vocab.word(ta[diffs[0]]).unwrap(), "three");
        assert_eq!(vocab.word(tb[diffs[0]]).unwrap(), "seven");
    }

    #[test]
    fn singular_forms_parse() {
        let vocab = Vocab::new();
        let f = CaptionFacts {
            template: TemplateKind::Curved,
            lane_count: 1,
            vehicle_count: 1,
            pedestrians: true,
            domain: DomainTag::Metro,
        };
        let text = f.text().unwrap();
        assert!(text.contains("one lane") && text.contains("one vehicle and pedestrians"));
        let parsed = parse_caption(
            &PromptTokens {
                ids: vocab.encode(&text).unwrap(),
            },
            &vocab,
        )
        .unwrap();
        assert_eq!(parsed, f);
    }
}
