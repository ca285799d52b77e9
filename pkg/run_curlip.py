#!/usr/bin/env python3
"""
Main entry point for the URL detection pipeline
Usage: python run_curlip.py <command> [options]   (python run_curlip.py --help)
"""

import sys

from cli.main import main

if __name__ == "__main__":
    sys.exit(main())
