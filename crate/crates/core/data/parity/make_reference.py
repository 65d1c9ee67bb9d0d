"""Regenerate the parity fixtures and their reference scores.

Needs `pip install seqeval`. Scores come from seqeval's default
(conlleval-compatible) mode.
"""

import json
import random
from pathlib import Path

from seqeval.metrics import classification_report, f1_score, precision_score, recall_score

HERE = Path(__file__).parent
TYPES = ["PER", "LOC", "ORG", "MISC"]


def write(name, sents):
    with open(HERE / f"{name}.txt", "w") as f:
        for toks, gold, pred in sents:
            for t, g, p in zip(toks, gold, pred):
                f.write(f"{t} {g} {p}\n")
            f.write("\n")


def bio(rng, n):
    tags, i = [], 0
    while i < n:
        if rng.random() < 0.35:
            k = rng.choice(TYPES)
            length = min(rng.randint(1, 3), n - i)
            tags += [f"B-{k}"] + [f"I-{k}"] * (length - 1)
            i += length
        else:
            tags.append("O")
            i += 1
    return tags


def noisy(rng, tags, rate, scheme_tags):
    return [rng.choice(scheme_tags) if rng.random() < rate else t for t in tags]


def random_fixture(seed, count, rate, scheme_tags):
    rng = random.Random(seed)
    out = []
    for _ in range(count):
        n = rng.randint(1, 15)
        gold = bio(rng, n)
        pred = noisy(rng, gold, rate, scheme_tags)
        out.append(([f"w{j}" for j in range(n)], gold, pred))
    return out


def fixtures():
    bio_tags = ["O"] + [f"{p}-{k}" for p in "BI" for k in TYPES]
    bioes_tags = ["O"] + [f"{p}-{k}" for p in "BIES" for k in TYPES]
    yield "half", [
        (["Ann", "Lee", "visited", "Rome"], ["B-PER", "E-PER", "O", "S-LOC"], ["B-PER", "E-PER", "B-LOC", "E-LOC"]),
    ]
    yield "irregular", [
        # Chunks opened by I-, type switches inside a run, dangling E-.
        (list("abcdefgh"), ["I-PER", "I-PER", "O", "B-LOC", "I-ORG", "O", "E-MISC", "O"],
         ["B-PER", "I-PER", "O", "B-LOC", "I-LOC", "O", "I-MISC", "O"]),
        (list("abcde"), ["B-ORG", "B-ORG", "I-ORG", "O", "S-PER"], ["B-ORG", "I-ORG", "I-ORG", "O", "I-PER"]),
    ]
    yield "no_predictions", [
        (list("abcd"), ["B-PER", "I-PER", "O", "B-LOC"], ["O", "O", "O", "O"]),
        (list("ab"), ["O", "B-MISC"], ["O", "O"]),
    ]
    yield "random_bio", random_fixture(11, 40, 0.15, bio_tags)
    yield "random_bioes", random_fixture(12, 40, 0.2, bioes_tags)


def score(sents):
    gold = [g for _, g, _ in sents]
    pred = [p for _, _, p in sents]
    report = classification_report(gold, pred, output_dict=True, zero_division=0)
    per_type = {
        k: {"precision": v["precision"], "recall": v["recall"], "f1": v["f1-score"], "support": int(v["support"])}
        for k, v in report.items()
        if k not in ("micro avg", "macro avg", "weighted avg")
    }
    return {
        "overall": {
            "precision": precision_score(gold, pred, zero_division=0),
            "recall": recall_score(gold, pred, zero_division=0),
            "f1": f1_score(gold, pred, zero_division=0),
        },
        "per_type": per_type,
    }


def main():
    refs = {}
    for name, sents in fixtures():
        write(name, sents)
        refs[name] = score(sents)
    with open(HERE / "reference.json", "w") as f:
        json.dump(refs, f, indent=2, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
