"""Pass-through codec: ``python -m shortcut_audit.identity_codec IN OUT [Z]`` copies IN to OUT."""

import shutil
import sys


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) < 2:
        print("usage: identity_codec IN OUT [Z]", file=sys.stderr)
        return 2
    shutil.copyfile(argv[0], argv[1])
    return 0


if __name__ == "__main__":
    sys.exit(main())
