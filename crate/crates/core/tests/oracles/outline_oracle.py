"""Reference outlines from Python's own parser.

Usage: outline_oracle.py FILE... > oracle.json

For each file: every class / def / async def with kind, dotted qualified
name, first line (earliest decorator or the keyword line) and last line
(end of the last body statement). Repeated qualified names get "#2", "#3"
in keyword-line order. Output is sorted by (start asc, end desc).
"""

import ast
import json
import os
import sys


def outline(source):
    tree = ast.parse(source)
    # Names depend on the parent's final (deduplicated) name, so resolve in
    # keyword-line order, parents first.
    result = []
    seen = {}
    names = {}
    defs = []

    def collect(node, parent):
        for child in ast.iter_child_nodes(node):
            if isinstance(child, (ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                defs.append((child, parent))
                collect(child, child)
            else:
                collect(child, parent)

    collect(tree, None)
    defs.sort(key=lambda d: (d[0].lineno, d[0].col_offset))
    for node, parent in defs:
        base = node.name if parent is None else names[id(parent)] + "." + node.name
        seen[base] = seen.get(base, 0) + 1
        name = base if seen[base] == 1 else "%s#%d" % (base, seen[base])
        names[id(node)] = name
        if isinstance(node, ast.ClassDef):
            kind = "class"
        elif isinstance(parent, ast.ClassDef):
            kind = "method"
        else:
            kind = "function"
        start = min([node.lineno] + [d.lineno for d in node.decorator_list])
        result.append({"kind": kind, "qualified_name": name, "start_line": start, "end_line": node.end_lineno})
    result.sort(key=lambda s: (s["start_line"], -s["end_line"]))
    return result


def main(paths):
    out = {}
    for path in paths:
        with open(path, encoding="utf-8") as f:
            out[os.path.basename(path)] = outline(f.read())
    json.dump(out, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main(sys.argv[1:])
