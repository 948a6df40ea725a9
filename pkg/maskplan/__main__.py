"""
Entry point for running maskplan as a module: python -m maskplan
"""

from .cli import main

if __name__ == "__main__":
    main()
