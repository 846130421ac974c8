"""
The SCAN command language
=========================

Every SCAN command is generated by a small grammar and has exactly one action
sequence. This walk-through enumerates the language, interprets a few commands
and builds the three standard train/test splits.
"""

from collections import Counter

from scanformer import scan

# the whole language fits in memory: ~21k commands, enumerated in sorted order
commands = scan.enumerate_commands()
print(f"{len(commands)} commands, longest has {max(len(c.split()) for c in commands)} words")

# interpretation is compositional: modifiers wrap the denotation of what they modify
for cmd in ["jump", "turn left twice", "jump around right", "walk opposite left after run thrice"]:
    print(f"{cmd!r:45} -> {' '.join(scan.interpret(cmd))}")

# ungrammatical input is reported with the offending token position
try:
    scan.interpret("walk around")
except scan.ScanParseError as err:
    print("parse error:", err)

# target lengths are heavily skewed; the longest needs 48 actions
lengths = Counter(len(scan.interpret(c)) for c in commands)
print("most common action lengths:", lengths.most_common(5))

# the three splits: random 80/20, held-out "jump" composition, held-out "around right"
for name in scan.SPLIT_NAMES:
    split = scan.build_split(scan.SplitSpec(name))
    print(f"{name:13} train {len(split.train):6d}  test {len(split.test):6d}")

# the jump split keeps only the bare primitive in training
jump = scan.build_split(scan.SplitSpec("jump"))
print("train commands containing 'jump':", [" ".join(ex.command) for ex in jump.train if "jump" in ex.command])
