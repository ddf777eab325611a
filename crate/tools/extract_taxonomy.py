#!/usr/bin/env python3
"""Regenerate the shipped ADE20K palette and hypernym taxonomy.

Inputs:
  --classes   JSON file with `classes` (150 names) and `palette` (150 RGB triples),
              as published with the ADE20K scene-parsing benchmark.
  --wordnet   directory holding WordNet 3.0 `index.noun` / `data.noun`.
  --subs      substitution file (`from<TAB>to`), applied before the lookup.
  --senses    optional sense overrides (`word<TAB>sense-number`, 1-based).

Outputs `ade20k_palette.tsv` and `ade20k_taxonomy.tsv` into --out.

Every class word is attached to the hypernym chain of its chosen noun sense
(first sense unless overridden). Ancestors that are not class words are named
`lemma.n.NN` after their WordNet synset so that they never collide with
class words.
"""
import argparse
import json
import os


def normalize(word):
    return "_".join(word.strip().lower().split())


def read_tsv(path):
    out = {}
    if path and os.path.exists(path):
        for line in open(path, encoding="utf-8"):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            a, b = line.split("\t")
            out[a] = b
    return out


def load_index(path):
    index = {}
    for line in open(path, encoding="utf-8"):
        if line.startswith(" "):
            continue
        parts = line.split()
        lemma = parts[0]
        p_cnt = int(parts[3])
        offsets = parts[4 + p_cnt + 2:]
        index[lemma] = offsets
    return index


def load_data(path):
    synsets = {}
    for line in open(path, encoding="utf-8"):
        if line.startswith(" "):
            continue
        body = line.split("|")[0].split()
        offset = body[0]
        w_cnt = int(body[3], 16)
        words = [body[4 + 2 * i] for i in range(w_cnt)]
        pos = 4 + 2 * w_cnt
        p_cnt = int(body[pos])
        hypernyms = []
        for i in range(p_cnt):
            sym, target, tpos = body[pos + 1 + 4 * i: pos + 4 + 4 * i]
            if sym in ("@", "@i") and tpos == "n":
                hypernyms.append(target)
        synsets[offset] = (words, hypernyms)
    return synsets


def synset_name(synsets, index, offset):
    lemma = synsets[offset][0][0].lower()
    number = index[lemma].index(offset) + 1 if lemma in index and offset in index[lemma] else 0
    return "%s.n.%02d" % (lemma, number)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--classes", required=True)
    ap.add_argument("--wordnet", required=True)
    ap.add_argument("--subs", required=True)
    ap.add_argument("--senses")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    meta = json.load(open(args.classes))
    subs = read_tsv(args.subs)
    senses = {k: int(v) for k, v in read_tsv(args.senses).items()}
    index = load_index(os.path.join(args.wordnet, "index.noun"))
    synsets = load_data(os.path.join(args.wordnet, "data.noun"))

    with open(os.path.join(args.out, "ade20k_palette.tsv"), "w", encoding="utf-8") as f:
        for name, (r, g, b) in zip(meta["classes"], meta["palette"]):
            f.write("%d,%d,%d\t%s\n" % (r, g, b, normalize(name)))

    words = []
    for name in meta["classes"]:
        w = normalize(name)
        w = subs.get(w, w)
        if w not in words:
            words.append(w)

    chosen = {}
    for w in words:
        if w not in index:
            raise SystemExit("no noun sense for %r; add a substitution" % w)
        offset = index[w][senses.get(w, 1) - 1]
        if offset in chosen:
            raise SystemExit("%r and %r share a sense; override one" % (chosen[offset], w))
        chosen[offset] = w

    edges = {}
    for offset, word in chosen.items():
        node, name = offset, word
        while True:
            parents = synsets[node][1]
            if not parents:
                break
            parent = parents[0]
            pname = chosen.get(parent) or synset_name(synsets, index, parent)
            if name in edges:
                break
            edges[name] = pname
            node, name = parent, pname

    with open(os.path.join(args.out, "ade20k_taxonomy.tsv"), "w", encoding="utf-8") as f:
        for child in sorted(edges):
            f.write("%s\t%s\n" % (child, edges[child]))


if __name__ == "__main__":
    main()
