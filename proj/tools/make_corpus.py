#!/usr/bin/env python3
# Copyright (c) 2026 The oac-quant Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Generates data/corpus.txt, the small ASCII text used by tests.

The text is produced from a hand-written grammar so the repository carries no
third-party prose. The output is dedicated to the public domain (CC0).
"""

import argparse
import random

NAMES = ["Ada", "Bram", "Cora", "Dov", "Elin", "Farid", "Greta", "Hugo",
         "Ines", "Jonas", "Kira", "Lev", "Mira", "Nils", "Orla", "Pavel"]
PLACES = ["the harbor", "the mill", "the old bridge", "the market", "the hill",
          "the library", "the orchard", "the station", "the river bank",
          "the north gate", "the bakery", "the lighthouse"]
NOUNS = ["lantern", "letter", "basket", "boat", "garden", "clock", "map",
         "kettle", "ladder", "window", "wagon", "coat", "drum", "bell",
         "notebook", "compass", "rope", "candle", "violin", "bicycle"]
ADJS = ["small", "old", "bright", "quiet", "heavy", "green", "broken",
        "warm", "narrow", "painted", "wooden", "silver", "strange", "tall"]
VERBS = [("carry", "carries", "carried"), ("find", "finds", "found"),
         ("mend", "mends", "mended"), ("paint", "paints", "painted"),
         ("open", "opens", "opened"), ("sell", "sells", "sold"),
         ("watch", "watches", "watched"), ("build", "builds", "built"),
         ("clean", "cleans", "cleaned"), ("borrow", "borrows", "borrowed"),
         ("hide", "hides", "hid"), ("bring", "brings", "brought")]
MOTION = [("walk", "walks", "walked"), ("run", "runs", "ran"),
          ("row", "rows", "rowed"), ("climb", "climbs", "climbed"),
          ("wander", "wanders", "wandered"), ("hurry", "hurries", "hurried")]
TIMES = ["in the morning", "at noon", "before dawn", "after supper",
         "on Sunday", "in the spring", "late at night", "every evening",
         "during the storm", "when the bell rang"]
WEATHER = ["rain", "fog", "snow", "wind", "sunlight", "thunder"]
ADVERBS = ["slowly", "carefully", "quickly", "gladly", "quietly", "twice"]
NUMBERS = ["two", "three", "four", "five", "six", "seven", "eight", "nine",
           "ten", "twelve"]


def plural(noun):
  return noun + "es" if noun.endswith(("s", "ch", "sh")) else noun + "s"


def noun_phrase(r):
  if r.random() < 0.5:
    return f"the {r.choice(ADJS)} {r.choice(NOUNS)}"
  return f"a {r.choice(NOUNS)}" if r.random() < 0.5 else f"the {r.choice(NOUNS)}"


def fix_article(text):
  for v in "aeiou":
    text = text.replace(f" a {v}", f" an {v}")
  if text.startswith("A ") and text[2] in "aeiou":
    text = "An " + text[2:]
  return text


def sentence(r):
  name = r.choice(NAMES)
  other = r.choice([n for n in NAMES if n != name])
  kind = r.randrange(9)
  if kind == 0:
    v = r.choice(VERBS)
    s = f"{name} {v[2]} {noun_phrase(r)} {r.choice(TIMES)}."
  elif kind == 1:
    v = r.choice(MOTION)
    s = f"{name} {v[1]} to {r.choice(PLACES)} {r.choice(TIMES)}."
  elif kind == 2:
    v = r.choice(VERBS)
    s = (f"{name} and {other} {v[0]} {noun_phrase(r)} near "
         f"{r.choice(PLACES)}.")
  elif kind == 3:
    s = (f"The {r.choice(WEATHER)} came {r.choice(TIMES)}, so {name} stayed "
         f"at {r.choice(PLACES)}.")
  elif kind == 4:
    v = r.choice(VERBS)
    s = (f'"Will you {v[0]} {noun_phrase(r)}?" asked {name}. '
         f'"Yes," said {other}, "I will {v[0]} it {r.choice(ADVERBS)}."')
  elif kind == 5:
    n = r.choice(NUMBERS)
    s = (f"There were {n} {plural(r.choice(NOUNS))} in {r.choice(PLACES)}, and "
         f"{name} counted them {r.choice(ADVERBS)}.")
  elif kind == 6:
    v = r.choice(MOTION)
    w = r.choice(VERBS)
    s = (f"After {name} {v[2]} home, {other} {w[2]} {noun_phrase(r)} "
         f"{r.choice(ADVERBS)}.")
  elif kind == 7:
    s = (f"{noun_phrase(r).capitalize()} was {r.choice(ADJS)}, but "
         f"{noun_phrase(r)} was {r.choice(ADJS)}.")
  else:
    v = r.choice(VERBS)
    s = f"If {name} {v[1]} {noun_phrase(r)}, {other} {v[1]} one too."
  return fix_article(s)


def main():
  ap = argparse.ArgumentParser()
  ap.add_argument("--seed", type=int, default=7)
  ap.add_argument("--bytes", type=int, default=131072)
  ap.add_argument("--out", default="data/corpus.txt")
  args = ap.parse_args()
  r = random.Random(args.seed)
  paragraphs = []
  total = 0
  while total < args.bytes:
    p = " ".join(sentence(r) for _ in range(r.randint(3, 7)))
    paragraphs.append(p)
    total += len(p) + 2
  with open(args.out, "w", encoding="ascii") as f:
    f.write("\n\n".join(paragraphs) + "\n")


if __name__ == "__main__":
  main()
