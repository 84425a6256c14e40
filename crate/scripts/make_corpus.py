"""Writes the bundled sample corpus: seeded template sentences over a small vocabulary."""
import random
import sys

rng = random.Random(0)
subjects = ["the miller", "a young fox", "the old keeper", "my sister", "the river", "a quiet crow",
            "the baker", "our neighbour", "the stone bridge", "a tired horse", "the north wind", "the clerk"]
verbs = ["carried", "watched", "followed", "found", "painted", "counted", "crossed", "remembered",
         "mended", "sold", "lost", "opened"]
objects = ["the lantern", "seven apples", "a broken wheel", "the long road", "a copper key", "the harvest",
           "two small boats", "the morning bread", "a letter", "the garden gate", "an empty jar", "the ledger"]
places = ["by the mill", "near the water", "under the hill", "at the market", "in the cold barn",
          "past the orchard", "along the wall", "before dawn", "after the rain", "in the village"]
adverbs = ["slowly", "again", "without a word", "twice", "with great care", "at last", "quickly"]
joins = ["and then", "but", "so", "while", "because"]


def sentence():
    s = f"{rng.choice(subjects)} {rng.choice(verbs)} {rng.choice(objects)}"
    if rng.random() < 0.6:
        s += f" {rng.choice(places)}"
    if rng.random() < 0.4:
        s += f" {rng.choice(adverbs)}"
    if rng.random() < 0.3:
        s += f", {rng.choice(joins)} {rng.choice(subjects)} {rng.choice(verbs)} {rng.choice(objects)}"
    if rng.random() < 0.15:
        s += f" on day {rng.randint(1, 99)}"
    return s[0].upper() + s[1:] + rng.choice([".", ".", ".", "!", "?"])


def main(path, size):
    out = []
    total = 0
    while total < size:
        para = " ".join(sentence() for _ in range(rng.randint(3, 7))) + "\n\n"
        out.append(para)
        total += len(para)
    text = "".join(out)[:size]
    with open(path, "w", encoding="ascii") as f:
        f.write(text)


if __name__ == "__main__":
    main(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 65536)
