#!/usr/bin/env python3
"""
Setup script for the Kernel Topic Model
"""

import subprocess
import sys
import os


def run_command(command):
    """Run shell command and handle errors"""
    try:
        result = subprocess.run(command, shell=True, check=True, capture_output=True, text=True)
        print(f"✅ {command}")
        return result.stdout
    except subprocess.CalledProcessError as e:
        print(f"❌ {command}")
        print(f"Error: {e.stderr}")
        return None


def setup_environment():
    """Setup Python virtual environment and dependencies"""
    print("🚀 Setting up Kernel Topic Model...")

    if not os.path.exists("venv"):
        print("📦 Creating virtual environment...")
        run_command(f"{sys.executable} -m venv venv")

    print("📥 Installing dependencies...")
    if sys.platform == "win32":
        pip_path = "venv\\Scripts\\pip.exe"
        python_path = "venv\\Scripts\\python.exe"
    else:
        pip_path = "venv/bin/pip"
        python_path = "venv/bin/python"

    run_command(f"{pip_path} install --upgrade pip")
    run_command(f"{pip_path} install -r requirements.txt")

    print("🧪 Generating the bundled synthetic corpus...")
    run_command(f"{python_path} -m ktm generate-synthetic --out data/synthetic")

    print("\n✅ Setup complete!")
    print("\n📋 Next steps:")
    print("1. Train: python run.py train --corpus data/synthetic/corpus.txt --vocab data/synthetic/vocab.txt "
          "--meta data/synthetic/meta.csv --topics 3 --out models/synthetic")
    print("2. Predict: python run.py predict --model models/synthetic --at time=5")
    print("3. Validate the bridge: python run.py bridge-check --output bridge.csv")
    print("4. Run tests: pytest")


if __name__ == "__main__":
    setup_environment()
