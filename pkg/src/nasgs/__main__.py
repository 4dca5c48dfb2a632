"""Allow `python -m nasgs`."""

from .cli import main

if __name__ == "__main__":
    main()
