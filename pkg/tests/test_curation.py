"""Curation pipeline: personas, relevance, generation validation, assembly."""

import dataclasses
import json

import pytest

from editlens.curation import (
    FEATURE_ORDER,
    CuratedItem,
    CurationError,
    FeatureSpace,
    GenerationResult,
    PERSONA_TEMPLATE,
    RELEVANCE_TEMPLATE,
    allocate_counts,
    assemble_dataset,
    build_generation_prompt,
    check_relevance,
    curate_images,
    generate_instructions,
    load_categories,
    load_feature_space,
    render_persona_system_prompt,
    sample_persona,
    validate_generation,
)
from editlens.gateway import Gateway, mock_provider
from editlens.model import (
    CategorySpec,
    Domain,
    EntityEdit,
    ExplicitSpec,
    ImageRef,
    Insertion,
    Persona,
    Split,
    load_dataset,
)
from support import FIXTURES, write_png

CURATION = FIXTURES / "curation"


def curation_gateway():
    return Gateway(mock_provider(CURATION / "mock"))


def spec(domain=Domain.PHYSICAL, name="Season", guideline="g", requirement=None):
    return CategorySpec(domain=domain, name=name, guideline=guideline, requirement=requirement)


def generation(
    abstract="Let winter settle gently over the garden.",
    edits=(("rose bush", ("Cover the rose bush with snow.",)),),
    general="",
    insertions=(),
    label="Season",
    synthetic=False,
    domain=Domain.PHYSICAL,
):
    return GenerationResult(
        category_label=label,
        abstract_prompt=abstract,
        explicit=ExplicitSpec(
            entity_edits=tuple(EntityEdit(entity=e, instructions=tuple(i)) for e, i in edits),
            general_instruction=general,
            insertions=tuple(Insertion(entity=e, placement=p) for e, p in insertions),
        ),
        synthetic=synthetic,
        domain=domain,
    )


class TestFeatureSpace:
    def test_packaged_space_is_ten_by_ten(self):
        fs = load_feature_space()
        assert set(fs.features) >= set(FEATURE_ORDER)
        for name in FEATURE_ORDER:
            assert len(fs.features[name]) == 10

    def test_cardinality_is_ten_to_the_ten(self):
        assert load_feature_space().cardinality == 10**10

    def test_missing_feature_rejected(self):
        fs = {name: tuple(f"v{i}" for i in range(10)) for name in FEATURE_ORDER[:-1]}
        with pytest.raises(CurationError, match="missing features"):
            FeatureSpace(features=fs)

    def test_wrong_width_rejected(self):
        fs = {name: tuple(f"v{i}" for i in range(10)) for name in FEATURE_ORDER}
        fs["Age"] = ("young", "old")
        with pytest.raises(CurationError, match="expected 10"):
            FeatureSpace(features=fs)

    def test_duplicate_values_rejected(self):
        fs = {name: tuple(f"v{i}" for i in range(10)) for name in FEATURE_ORDER}
        fs["Hobby"] = ("chess",) * 10
        with pytest.raises(CurationError, match="duplicate values"):
            FeatureSpace(features=fs)


class TestPersona:
    def test_same_seed_replays_exactly(self):
        fs = load_feature_space()
        assert sample_persona(fs, 42) == sample_persona(fs, 42)

    def test_different_seeds_differ_somewhere(self):
        fs = load_feature_space()
        personas = {tuple(sample_persona(fs, s).to_dict().items()) for s in range(50)}
        assert len(personas) > 40  # collisions over 10^10 combinations are freak events

    def test_values_come_from_the_space(self):
        fs = load_feature_space()
        p = sample_persona(fs, 7)
        assert p.age_group in fs.features["Age"]
        assert p.country in fs.features["Country"]
        assert p.motivation in fs.features["Motivation"]

    def test_render_fills_every_slot(self):
        p = sample_persona(load_feature_space(), 3)
        text = render_persona_system_prompt(p)
        assert "{" not in text.replace("{name}", "")  # no unfilled slots remain
        assert p.name in text
        assert p.country in text

    def test_single_pass_keeps_braces_in_values_literal(self):
        p = Persona(
            age_group="adult",
            country="Chile",
            gender="woman",
            hobby="chess",
            profession="engineer",
            tech_skill="expert",
            visual_language="plain",
            personality="direct",
            name="{country}",
            motivation="curiosity",
        )
        text = render_persona_system_prompt(p)
        assert "named {country} from Chile" in text

    def test_template_mentions_all_slots(self):
        for slot in ("{name}", "{country}", "{age}", "{gender}", "{profession}",
                     "{hobby}", "{tech_skill}", "{motivation}", "{visual_lang}", "{personality}"):
            assert slot in PERSONA_TEMPLATE


class TestCategories:
    def test_packaged_registry_loads(self):
        cats = load_categories()
        names = [c.name for c in cats]
        assert len(names) == len(set(names))
        assert {c.domain for c in cats} == set(Domain)

    def test_duplicate_names_rejected(self, tmp_path):
        p = tmp_path / "cats.json"
        entry = {"domain": "Physical", "name": "Season", "guideline": "x"}
        p.write_text(json.dumps([entry, entry]), encoding="utf-8")
        with pytest.raises(CurationError, match="duplicate category names"):
            load_categories(p)


class TestRelevance:
    def test_no_requirement_short_circuits(self, tmp_path):
        gw = curation_gateway()
        img = ImageRef(path=str(CURATION / "images" / "garden.png"))
        ok, reason = check_relevance(gw, img, ["fence"], spec(requirement=None))
        assert ok is True
        assert reason == "category has no requirement predicate"
        assert gw.dispatches == 0

    def test_template_renders_literal_json_shape(self):
        text = RELEVANCE_TEMPLATE.format(category="c", requirement="r", entities="a, b")
        assert '{"relevant": true or false, "reason": "short justification"}' in text

    def test_positive_verdict_from_fixture(self):
        gw = curation_gateway()
        img = ImageRef(path=str(CURATION / "images" / "garden.png"))
        cat = spec(Domain.EMOTIONAL, "Mood/Emotion", requirement="scene carries a mood")
        ok, reason = check_relevance(gw, img, ["rose bush"], cat)
        assert ok is True
        assert reason

    def test_negative_verdict_from_fixture(self):
        gw = curation_gateway()
        img = ImageRef(path=str(CURATION / "images" / "garden.png"))
        cat = spec(Domain.PHYSICAL, "Pose", requirement="a posed figure is present")
        ok, _ = check_relevance(gw, img, ["rose bush"], cat)
        assert ok is False

    def test_unparseable_verdict_repaired(self):
        gw = curation_gateway()
        img = ImageRef(path=str(CURATION / "images" / "desk.png"))
        cat = spec(Domain.LOGICAL, "Temporal", requirement="scene can age")
        ok, _ = check_relevance(gw, img, ["desk"], cat)
        assert ok is True
        assert gw.dispatches == 2
        assert gw.mock_calls == ["relevance/desk/temporal", "relevance/desk/temporal/repair"]

    def test_double_failure_means_not_relevant(self, tmp_path):
        fdir = tmp_path / "mock" / "relevance" / "img"
        fdir.mkdir(parents=True)
        (fdir / "season.txt").write_text("prose only", encoding="utf-8")
        (fdir / "season").mkdir()
        (fdir / "season" / "repair.txt").write_text("still prose", encoding="utf-8")
        img_path = write_png(tmp_path / "img.png")
        gw = Gateway(mock_provider(tmp_path / "mock"))
        ok, reason = check_relevance(
            gw, ImageRef(path=str(img_path)), [], spec(requirement="anything")
        )
        assert (ok, reason) == (False, "unparseable")


class TestValidateGeneration:
    ENTITIES = ["rose bush", "fence"]

    def test_clean_generation_passes(self):
        g = generation(edits=(("rose bush", ("Add snow.",)), ("fence", ())))
        assert validate_generation(g, self.ENTITIES) == []

    def test_sixteen_words_rejected(self):
        g = generation(
            abstract="Please make every single surface in this quiet garden look like it was carved from wood",
            edits=(("rose bush", ("Add snow.",)), ("fence", ())),
        )
        problems = validate_generation(g, self.ENTITIES)
        assert any("16 words" in p for p in problems)

    def test_removed_entity_rejected(self):
        g = generation(edits=(("rose bush", ("Add snow.",)),))
        problems = validate_generation(g, self.ENTITIES)
        assert any("'fence' removed" in p for p in problems)

    def test_empty_explicit_rejected(self):
        g = generation(edits=(("rose bush", ()), ("fence", ())), general="")
        assert any("empty" in p for p in validate_generation(g, self.ENTITIES))

    def test_insertions_count_as_content(self):
        g = generation(
            edits=(("rose bush", ()), ("fence", ())),
            insertions=(("bird bath", "Place a bird bath 20cm left of the fence."),),
        )
        assert validate_generation(g, self.ENTITIES) == []

    def test_two_sentence_instruction_rejected(self):
        g = generation(edits=(("rose bush", ("Add snow. Raise contrast.",)), ("fence", ())))
        assert any("non-atomic" in p for p in validate_generation(g, self.ENTITIES))

    def test_and_then_coordination_rejected(self):
        g = generation(edits=(("rose bush", ("Add snow and then freeze the pond.",)), ("fence", ())))
        assert any("non-atomic" in p for p in validate_generation(g, self.ENTITIES))

    def test_entity_match_ignores_case_and_spacing(self):
        g = generation(edits=(("Rose  Bush", ("Add snow.",)), ("FENCE", ())))
        assert validate_generation(g, self.ENTITIES) == []


class TestGenerationPromptAndParse:
    def test_prompt_embeds_persona_entities_and_categories(self):
        persona = sample_persona(load_feature_space(), 5)
        img = ImageRef(path=str(CURATION / "images" / "garden.png"))
        cats = [spec(requirement="req text"), spec(name="Size")]
        req = build_generation_prompt(persona, img, ["rose bush", "fence"], cats)
        assert persona.name in req.system_text
        assert "rose bush, fence" in req.system_text
        assert "- **Physical-Season**: g Requirement: req text" in req.system_text
        assert "- **Physical-Size**: g" in req.system_text
        assert req.fixture_id == "generate/garden"
        assert '{"results": [{"category": "<Domain>-<Name> or NEW_<name>"' in req.system_text

    def test_generate_instructions_drops_invalid_and_unknown(self):
        gw = curation_gateway()
        img = ImageRef(path=str(CURATION / "images" / "garden.png"))
        cats = [c for c in load_categories() if c.name in ("Season", "Mood/Emotion", "Material")]
        results = generate_instructions(
            gw, img, ["rose bush", "gravel path", "fence"], cats,
            sample_persona(load_feature_space(), 1),
        )
        labels = [r.category_label for r in results]
        # Material is generated at 16 words and dropped by validation
        assert labels == ["Season", "Mood/Emotion", "NEW_SecretDoor"]
        assert results[2].synthetic is True
        assert results[2].domain is Domain.LOGICAL

    def test_generate_requires_categories(self):
        gw = curation_gateway()
        img = ImageRef(path=str(CURATION / "images" / "garden.png"))
        with pytest.raises(CurationError, match="no relevant categories"):
            generate_instructions(gw, img, [], [], sample_persona(load_feature_space(), 1))


class TestAllocateCounts:
    def test_exact_division(self):
        assert allocate_counts({"a": 0.5, "b": 0.5}, 10) == {"a": 5, "b": 5}

    def test_largest_remainder(self):
        got = allocate_counts({"a": 0.5, "b": 0.3, "c": 0.2}, 7)
        assert got == {"a": 4, "b": 2, "c": 1}  # quotas 3.5 / 2.1 / 1.4
        assert sum(got.values()) == 7

    def test_normalizes_imperfect_proportions(self):
        got = allocate_counts({"a": 0.333, "b": 0.333, "c": 0.333}, 9)
        assert got == {"a": 3, "b": 3, "c": 3}

    def test_remainder_tie_broken_by_key(self):
        got = allocate_counts({"b": 0.5, "a": 0.5}, 3)
        assert got == {"a": 2, "b": 1}

    def test_total_zero(self):
        assert allocate_counts({"a": 1.0}, 0) == {"a": 0}

    def test_negative_total_rejected(self):
        with pytest.raises(CurationError, match="non-negative"):
            allocate_counts({"a": 1.0}, -1)

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(CurationError, match="positive sum"):
            allocate_counts({"a": 0.0}, 5)

    def test_counts_within_one_of_quota(self):
        proportions = {"w": 0.22, "x": 0.31, "y": 0.19, "z": 0.28}
        total = 997
        got = allocate_counts(proportions, total)
        assert sum(got.values()) == total
        weight = sum(proportions.values())
        for key, count in got.items():
            assert abs(count - total * proportions[key] / weight) < 1.0


class TestAssembleDataset:
    def _item(self, stem="garden", label="Season", domain=Domain.PHYSICAL, synthetic=False):
        persona = sample_persona(load_feature_space(), 9)
        return CuratedItem(
            image=ImageRef(path=f"images/{stem}.png"),
            entities=("rose bush", "fence"),
            persona=persona,
            result=generation(
                label=label,
                domain=domain,
                synthetic=synthetic,
                edits=(("rose bush", ("Add snow.",)), ("fence", ())),
            ),
        )

    def test_id_scheme_and_files(self, tmp_path):
        samples, manifest = assemble_dataset(
            [self._item(), self._item(label="Mood/Emotion", domain=Domain.EMOTIONAL)], tmp_path
        )
        assert [s.sample_id for s in samples] == ["garden--mood-emotion", "garden--season"]
        assert (tmp_path / "samples.jsonl").exists()
        assert (tmp_path / "manifest.json").exists()
        loaded, _ = load_dataset(tmp_path)
        assert loaded == samples

    def test_defaults_test_split_unverified(self, tmp_path):
        samples, _ = assemble_dataset([self._item()], tmp_path)
        assert samples[0].split is Split.TEST
        assert samples[0].verified is False

    def test_duplicate_pair_skipped(self, tmp_path):
        samples, _ = assemble_dataset([self._item(), self._item()], tmp_path)
        assert len(samples) == 1

    def test_synthetic_without_domain_defaults_logical(self, tmp_path):
        item = self._item(label="NEW_Thing", domain=None, synthetic=True)
        samples, _ = assemble_dataset([item], tmp_path)
        assert samples[0].category.domain is Domain.LOGICAL
        assert samples[0].synthetic_category is True

    def test_stratified_train_split(self, tmp_path):
        items = []
        for i in range(6):
            items.append(self._item(stem=f"img-{i}", label="Season"))
        for i in range(6, 10):
            items.append(
                self._item(stem=f"img-{i}", label="Mood/Emotion", domain=Domain.EMOTIONAL)
            )
        samples, manifest = assemble_dataset(
            items, tmp_path,
            train_proportions={"Physical": 0.5, "Emotional": 0.5},
            train_total=4, seed=3,
        )
        train = [s for s in samples if s.split is Split.TRAIN]
        assert len(train) == 4
        by_domain = {}
        for s in train:
            by_domain[s.category.domain.value] = by_domain.get(s.category.domain.value, 0) + 1
        assert by_domain == {"Physical": 2, "Emotional": 2}
        assert manifest.split_sizes == {"test": 6, "train": 4}

    def test_train_split_is_seed_deterministic(self, tmp_path):
        items = [self._item(stem=f"img-{i}") for i in range(5)]
        a, _ = assemble_dataset(
            items, tmp_path / "a", train_proportions={"Physical": 1.0}, train_total=2, seed=11
        )
        b, _ = assemble_dataset(
            items, tmp_path / "b", train_proportions={"Physical": 1.0}, train_total=2, seed=11
        )
        assert [s.split for s in a] == [s.split for s in b]

    def test_synthetic_excluded_from_train_draw(self, tmp_path):
        items = [self._item(stem=f"img-{i}") for i in range(2)]
        items.append(self._item(stem="img-s", label="NEW_X", domain=Domain.PHYSICAL, synthetic=True))
        samples, _ = assemble_dataset(
            items, tmp_path, train_proportions={"Physical": 1.0}, train_total=2, seed=1
        )
        synthetic = [s for s in samples if s.synthetic_category]
        assert all(s.split is Split.TEST for s in synthetic)

    def test_insufficient_pool_rejected(self, tmp_path):
        with pytest.raises(CurationError, match="only 1 available"):
            assemble_dataset(
                [self._item()], tmp_path,
                train_proportions={"Physical": 1.0}, train_total=2,
            )


class TestCurateImages:
    def test_end_to_end_over_fixture_corpus(self):
        gw = curation_gateway()
        items = curate_images(
            gw, CURATION / "images", load_categories(), load_feature_space(), seed=20240101
        )
        by_image = {}
        for item in items:
            by_image.setdefault(item.image.path.rsplit("/", 1)[-1], []).append(
                item.result.category_label
            )
        assert by_image["desk.png"] == [
            "Temporal", "InsertionGoal", "CommonsenseGoal", "NEW_PocketUniverse"
        ]
        # Material is generated over the word limit and dropped
        assert by_image["garden.png"] == ["Season", "Mood/Emotion", "NEW_SecretDoor"]
        assert len(items) == 7

    def test_replay_is_exact(self):
        args = (CURATION / "images", load_categories(), load_feature_space())
        first = curate_images(curation_gateway(), *args, seed=99)
        second = curate_images(curation_gateway(), *args, seed=99)
        assert first == second

    def test_personas_keyed_by_image_not_position(self):
        items = curate_images(
            curation_gateway(), CURATION / "images", load_categories(), load_feature_space(), seed=5
        )
        personas = {i.image.path.rsplit("/", 1)[-1]: i.persona for i in items}
        assert personas["desk.png"] != personas["garden.png"]

    def test_image_without_sidecar_skipped(self, tmp_path):
        write_png(tmp_path / "lonely.png")
        items = curate_images(
            curation_gateway(), tmp_path, load_categories(), load_feature_space(), seed=1
        )
        assert items == []

    def test_bad_sidecar_rejected(self, tmp_path):
        write_png(tmp_path / "img.png")
        (tmp_path / "img.entities.json").write_text('{"not": "a list"}', encoding="utf-8")
        with pytest.raises(CurationError, match="JSON list of entity names"):
            curate_images(
                curation_gateway(), tmp_path, load_categories(), load_feature_space(), seed=1
            )
