# Brute-force token F1 / exact match reference. Writes f1_cases.json with frozen expected scores.
import itertools, json, string, sys

def norm(s):
    s = s.lower()
    s = ''.join(c for c in s if c not in string.punctuation)
    return ' '.join(t for t in s.split() if t not in ('a', 'an', 'the'))

def best_overlap(p, g):
    # largest set of disjoint (pred index, gold index) pairs with equal tokens, by exhaustive search
    best = 0
    def go(i, used, n):
        nonlocal best
        if n + (len(p) - i) <= best:
            return
        if i == len(p):
            best = max(best, n); return
        for j in range(len(g)):
            if j not in used and g[j] == p[i]:
                go(i + 1, used | {j}, n + 1)
        go(i + 1, used, n)
    go(0, frozenset(), 0)
    return best

def f1(pred, gold):
    p, g = norm(pred).split(), norm(gold).split()
    if not p or not g:
        return 1.0 if not p and not g else 0.0
    o = best_overlap(p, g)
    if o == 0:
        return 0.0
    pr, rc = o / len(p), o / len(g)
    return 2 * pr * rc / (pr + rc)

cases = [
    ("Obama", ["Barack Obama"]),
    ("Barack Obama", ["Barack Obama"]),
    ("barack obama.", ["Barack Obama"]),
    ("The Barack Obama", ["Barack Obama"]),
    ("Michelle Obama", ["Barack Obama"]),
    ("", ["Barack Obama"]),
    ("", [""]),
    ("Rome", ["Rome", "Roma"]),
    ("Roma", ["Rome", "Roma"]),
    ("Paris France", ["Paris"]),
    ("paris, the capital of france", ["Paris"]),
    ("A", ["A"]),
    ("a", ["A"]),
    ("an apple", ["apple"]),
    ("the the the", ["the"]),
    ("1999", ["1999"]),
    ("1,999", ["1999"]),
    ("19 99", ["1999"]),
    ("New York City", ["New York"]),
    ("New York", ["New York City"]),
    ("york new", ["New York"]),
    ("new new york", ["new york york"]),
    ("cat cat cat dog", ["cat dog dog"]),
    ("Jupiter", ["Saturn"]),
    ("J.R.R. Tolkien", ["JRR Tolkien"]),
    ("J. R. R. Tolkien", ["JRR Tolkien"]),
    ("Tolkien", ["J. R. R. Tolkien"]),
    ("80 to 180 mmH2O", ["80-180 mmH2O"]),
    ("80180 mmh2o", ["80-180 mmH2O"]),
    ("United States of America", ["USA", "United States"]),
    ("U.S.A.", ["USA", "United States"]),
    ("the United States", ["USA", "United States"]),
    ("states united", ["United States"]),
    ("Leonardo da Vinci", ["da Vinci"]),
    ("Vinci", ["Leonardo da Vinci"]),
    ("  spaced   out   answer ", ["spaced out answer"]),
    ("tab\tseparated", ["tab separated"]),
    ("line\nbreak", ["line break"]),
    ("Hello!!!", ["hello"]),
    ("It's", ["its"]),
    ("rock-n-roll", ["rocknroll"]),
    ("rock and roll", ["rock n roll"]),
    ("x y z", ["z y x"]),
    ("x x y", ["x y y"]),
    ("one two three four five", ["two four six"]),
    ("a b c", ["b"]),
    ("zebra", ["a", "zebra"]),
    ("nothing in common", ["totally different words"]),
    ("March 3, 1847", ["3 March 1847"]),
    ("Alexander Graham Bell", ["Bell", "Alexander Bell"]),
]
assert len(cases) == 50
out = []
for pred, golds in cases:
    out.append({"prediction": pred, "gold": golds,
                "f1": max(f1(pred, g) for g in golds),
                "em": int(any(norm(pred) == norm(g) for g in golds))})
json.dump(out, open(sys.argv[1], 'w'), indent=1)
print(out[0])
