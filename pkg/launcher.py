#!/usr/bin/env python3
"""
SplatMap Launcher
Dependency check before handing over to the command-line interface
"""

import importlib
import sys

REQUIRED_PACKAGES = {
    'numpy': 'numpy',
    'scipy': 'scipy',
    'psutil': 'psutil',
    'imageio': 'imageio',
    'plyfile': 'plyfile',
    'tqdm': 'tqdm',
}

OPTIONAL_PACKAGES = {
    'matplotlib': 'matplotlib',
}


def check_dependencies() -> bool:
    """Check if all required dependencies are installed"""
    missing_required = []
    missing_optional = []

    for module, dist in REQUIRED_PACKAGES.items():
        try:
            importlib.import_module(module)
        except ImportError:
            missing_required.append(dist)

    for module, dist in OPTIONAL_PACKAGES.items():
        try:
            importlib.import_module(module)
        except ImportError:
            missing_optional.append(dist)

    if missing_required:
        print("Missing required dependencies:", file=sys.stderr)
        for dist in missing_required:
            print(f"   - {dist}", file=sys.stderr)
        print("\nPlease install missing dependencies:\npip install -r requirements.txt", file=sys.stderr)
        return False

    if missing_optional:
        print("Missing optional dependencies (loss.png will not be written):", file=sys.stderr)
        for dist in missing_optional:
            print(f"   - {dist}", file=sys.stderr)

    return True


def main() -> int:
    if sys.version_info < (3, 9):
        print(f"Python 3.9 or higher is required, found {sys.version.split()[0]}", file=sys.stderr)
        return 1
    if not check_dependencies():
        return 1

    from main import main as cli_main
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        sys.exit(130)
