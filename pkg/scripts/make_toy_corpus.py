"""Write a small synthetic multilingual corpus in the JSONL record format.

    python scripts/make_toy_corpus.py out/corpus.jsonl --docs 300
"""

import argparse
import json
import random
from pathlib import Path

WORDS = {
    "en": "the model reads a long document and learns which words belong together in context".split(),
    "fr": "le modèle lit un long document et apprend quels mots vont ensemble selon le contexte".split(),
    "de": "das Modell liest ein langes Dokument und lernt welche Wörter im Kontext zusammengehören".split(),
    "es": "el modelo lee un documento largo y aprende qué palabras van juntas en contexto".split(),
}
CODE = ["def f(x):\n    return x + 1\n", "for i in range(10):\n    print(i)\n", "int main() { return 0; }\n"]


def sentence(rng: random.Random, lang: str, n: int) -> str:
    return " ".join(rng.choice(WORDS[lang]) for _ in range(n)).capitalize() + "."


def make_records(n_docs: int, seed: int = 0) -> list[dict]:
    rng = random.Random(seed)
    out = []
    for i in range(n_docs):
        r = rng.random()
        if r < 0.7:
            lang = rng.choice(sorted(WORDS))
            text = " ".join(sentence(rng, lang, rng.randint(5, 15)) for _ in range(rng.randint(1, 4)))
            out.append({"text": text, "lang": lang, "source": "web" if lang == "en" else "multi",
                        "quality": rng.randint(1, 4)})
        elif r < 0.85:
            lang = rng.choice(["fr", "de", "es"])
            out.append({"kind": "parallel-pair", "src": sentence(rng, lang, 8), "tgt": sentence(rng, "en", 8),
                        "lang": f"{lang}-en", "source": "parallel"})
        else:
            out.append({"kind": "code", "text": rng.choice(CODE) * rng.randint(1, 3), "lang": "python",
                        "source": "code"})
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--docs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in make_records(args.docs, args.seed):
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"wrote {args.docs} records to {path}")


if __name__ == "__main__":
    main()
