"""Deterministic E2E-style corpus generator.

Produces ``trainset.csv`` / ``testset_w_refs.csv`` files in the E2E challenge
layout (columns ``mr``, ``ref``) over the challenge's slot ontology: eight
slots, 79 slot-value pairs. References are assembled from clause templates
with shuffled clause order, paraphrase choice and occasional slot omission,
so several distinct references share each MR, and NLU is not trivially
solvable from surface strings.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import format_mr

NAMES = [
    "Alimentum", "Aromi", "Bibimbap House", "Blue Spice", "Browns Cambridge", "Clowns",
    "Cocum", "Cotto", "Fitzbillies", "Giraffe", "Green Man", "Loch Fyne", "Midsummer House",
    "Strada", "Taste of Cambridge", "The Cambridge Blue", "The Cricketers", "The Dumpling Tree",
    "The Eagle", "The Golden Curry", "The Golden Palace", "The Mill", "The Olive Grove",
    "The Phoenix", "The Plough", "The Punter", "The Rice Boat", "The Twenty Two", "The Vaults",
    "The Waterman", "The Wrestlers", "Wildwood", "Zizzi", "Travellers Rest Beefeater",
]
NEAR = [
    "All Bar One", "Avalon", "Burger King", "Café Adriatic", "Café Brazil", "Café Rouge",
    "Café Sicilia", "Clare Hall", "Crowne Plaza Hotel", "Express by Holiday Inn",
    "Rainbow Vegetarian Café", "Raja Indian Cuisine", "Ranch", "The Bakers", "The Portland Arms",
    "The Rice Boat", "The Six Bells", "The Sorrento", "Yippee Noodle Bar",
]
EAT_TYPE = ["coffee shop", "pub", "restaurant"]
FOOD = ["Chinese", "English", "Fast food", "French", "Indian", "Italian", "Japanese"]
PRICE = ["cheap", "high", "less than £20", "moderate", "more than £30", "£20-25"]
RATING = ["1 out of 5", "3 out of 5", "5 out of 5", "average", "high", "low"]
AREA = ["city centre", "riverside"]
FAMILY = ["no", "yes"]

ONTOLOGY = {
    "name": NAMES,
    "eatType": EAT_TYPE,
    "food": FOOD,
    "priceRange": PRICE,
    "customer rating": RATING,
    "area": AREA,
    "familyFriendly": FAMILY,
    "near": NEAR,
}
SLOT_ORDER = ["name", "eatType", "food", "priceRange", "customer rating", "area", "familyFriendly", "near"]
# inclusion probability of each optional slot
SLOT_RATE = {"eatType": 0.75, "food": 0.6, "priceRange": 0.55, "customer rating": 0.55,
             "area": 0.6, "familyFriendly": 0.55, "near": 0.45}

PRICE_WORDS = {
    "cheap": ["cheap", "inexpensive", "low priced"],
    "moderate": ["moderately priced", "average priced", "mid priced"],
    "high": ["expensive", "high priced", "pricey"],
    "less than £20": ["priced less than £20", "under £20", "in the less than £20 price range"],
    "more than £30": ["priced more than £30", "over £30", "in the more than £30 price range"],
    "£20-25": ["priced £20-25", "in the £20-25 price range", "between £20 and £25"],
}
RATING_WORDS = {
    "low": ["a low customer rating", "a poor rating", "low ratings"],
    "average": ["an average customer rating", "average reviews", "an average rating"],
    "high": ["a high customer rating", "great reviews", "a high rating"],
    "1 out of 5": ["a rating of 1 out of 5", "a 1 out of 5 customer rating", "one star out of five"],
    "3 out of 5": ["a rating of 3 out of 5", "a 3 out of 5 customer rating", "three stars out of five"],
    "5 out of 5": ["a rating of 5 out of 5", "a 5 out of 5 customer rating", "five stars out of five"],
}
AREA_WORDS = {
    "city centre": ["in the city centre", "in the centre of the city", "in the city centre area"],
    "riverside": ["in the riverside area", "by the riverside", "on the riverside"],
}
FAMILY_WORDS = {
    "yes": ["family friendly", "kid friendly", "child friendly", "welcoming to families"],
    "no": ["not family friendly", "not kid friendly", "not child friendly", "for adults only"],
}


def sample_mr(rng: np.random.Generator) -> list[tuple[str, str]]:
    pairs = [("name", NAMES[rng.integers(len(NAMES))])]
    for slot in SLOT_ORDER[1:]:
        if rng.random() < SLOT_RATE[slot]:
            vals = ONTOLOGY[slot]
            pairs.append((slot, vals[rng.integers(len(vals))]))
    if len(pairs) < 3:
        # E2E frames carry at least three slots
        extra = [s for s in SLOT_ORDER[1:] if s not in dict(pairs)]
        for slot in rng.permutation(extra)[: 3 - len(pairs)]:
            vals = ONTOLOGY[str(slot)]
            pairs.append((str(slot), vals[rng.integers(len(vals))]))
        pairs.sort(key=lambda p: SLOT_ORDER.index(p[0]))
    return pairs


def _pick(rng, options):
    return options[rng.integers(len(options))]


def realize(pairs: list[tuple[str, str]], rng: np.random.Generator, omit_rate: float = 0.08) -> str:
    """One reference (one or more sentences) for the given MR."""
    slots = dict(pairs)
    name = slots["name"]
    shown = {s for s in slots if s == "name" or rng.random() >= omit_rate}

    def has(slot):
        return slot in shown

    noun = slots["eatType"] if has("eatType") else _pick(rng, ["place", "venue", "establishment"])
    food = slots.get("food") if has("food") else None
    if food and rng.random() < 0.4:
        openers = [f"{name} is a {food} {noun}", f"There is a {food} {noun} named {name}"]
        food = None
    else:
        openers = [f"{name} is a {noun}", f"There is a {noun} called {name}"]

    # each clause: (attached form, standalone sentence)
    clauses = []
    if food:
        clauses.append((_pick(rng, [f"serving {food} food", f"that serves {food} food",
                                    f"offering {food} cuisine"]),
                        _pick(rng, [f"It serves {food} food", f"They offer {food} cuisine"])))
    if has("priceRange"):
        w = _pick(rng, PRICE_WORDS[slots["priceRange"]])
        clauses.append((_pick(rng, [f"that is {w}", f"which is {w}"]), f"It is {w}"))
    if has("customer rating"):
        w = _pick(rng, RATING_WORDS[slots["customer rating"]])
        clauses.append((_pick(rng, [f"with {w}", f"that has {w}"]),
                        _pick(rng, [f"It has {w}", f"It has received {w}"])))
    if has("area"):
        w = _pick(rng, AREA_WORDS[slots["area"]])
        clauses.append((_pick(rng, [f"located {w}", w]), _pick(rng, [f"It is located {w}", f"It is {w}"])))
    if has("familyFriendly"):
        w = _pick(rng, FAMILY_WORDS[slots["familyFriendly"]])
        clauses.append((_pick(rng, [f"that is {w}", f"which is {w}"]), f"It is {w}"))
    if has("near"):
        w = slots["near"]
        clauses.append((_pick(rng, [f"near {w}", f"close to {w}", f"located near {w}"]),
                        _pick(rng, [f"It is near {w}", f"It is located close to {w}"])))

    clauses = [clauses[i] for i in rng.permutation(len(clauses))]
    cut = len(clauses)
    if len(clauses) > 2 and rng.random() < 0.5:
        cut = int(rng.integers(1, len(clauses)))
    attached = [c[0] for c in clauses[:cut]]
    text = _pick(rng, openers)
    if attached:
        head = ", ".join(attached[:-1])
        text += " " + (head + " and " if head else "") + attached[-1]
    sentences = [text] + [c[1] for c in clauses[cut:]]
    return ". ".join(sentences) + "."


def generate_rows(n_mrs: int, refs: tuple[int, int], seed: int, omit_rate: float = 0.08):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_mrs):
        mr = sample_mr(rng)
        mr_text = format_mr(mr)
        k = int(rng.integers(refs[0], refs[1] + 1))
        for _ in range(k):
            rows.append((mr_text, realize(mr, rng, omit_rate)))
    return rows


def write_csv(path: Path, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mr", "ref"])
        w.writerows(rows)


def write_corpus(out_dir, train_mrs: int = 1500, test_mrs: int = 300, seed: int = 2020,
                 train_refs=(1, 8), test_refs=(3, 8), omit_rate: float = 0.08) -> Path:
    """Write an E2E-format train/test pair of CSVs; returns ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = generate_rows(train_mrs, train_refs, seed, omit_rate)
    # training rows are shuffled so any row prefix covers many MRs
    perm = np.random.default_rng(seed + 1).permutation(len(train))
    write_csv(out / "trainset.csv", [train[i] for i in perm])
    write_csv(out / "testset_w_refs.csv", generate_rows(test_mrs, test_refs, seed + 2, omit_rate))
    return out
