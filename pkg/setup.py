#!/usr/bin/env python3
"""
Setup script for the low-bit weight classifier workspace
"""

import os
import sys
import subprocess
from pathlib import Path

from data import write_cifar10, make_synthetic

SAMPLE_DATA_DIR = Path('sample_data')


def create_directories(base='.'):
    """Create run and data directories"""
    directories = ['runs', 'configs', str(SAMPLE_DATA_DIR)]

    for directory in directories:
        Path(base, directory).mkdir(parents=True, exist_ok=True)
        print(f"✓ Created directory: {directory}")


def install_requirements():
    """Install required packages"""
    print("📦 Installing required packages...")
    try:
        subprocess.check_call([sys.executable, '-m', 'pip', 'install', '-r', 'requirements.txt'])
        print("✓ All packages installed successfully")
    except subprocess.CalledProcessError as e:
        print(f"❌ Error installing packages: {e}")
        return False
    return True


def create_env_file(base='.'):
    """Create .env file template"""
    env_content = """# Low-bit classifier configuration
# Copy this file to .env and update with your values

# Directory holding cifar-10-batches-bin (or the batch files themselves)
LOWBIT_DATA_DIR=

# Where runs write metrics.csv, model.lbq and config.resolved.json
LOWBIT_OUTPUT_DIR=runs

# DEBUG, INFO, WARNING or ERROR
LOWBIT_LOG_LEVEL=INFO
"""

    if not os.path.exists(Path(base, '.env')):
        Path(base, '.env.example').write_text(env_content, encoding='utf-8')
        print("✓ Created .env.example file")
    else:
        print("✓ .env file already exists")


def test_imports():
    """Test if all required modules can be imported"""
    print("🧪 Testing imports...")

    required_modules = ['numpy', 'scipy.special', 'scipy.ndimage', 'pydantic', 'dotenv']

    failed_imports = []
    for module in required_modules:
        try:
            __import__(module)
            print(f"✓ {module}")
        except ImportError:
            print(f"❌ {module}")
            failed_imports.append(module)

    if failed_imports:
        print(f"\n❌ Failed to import: {', '.join(failed_imports)}")
        print("Please install missing packages with: pip install -r requirements.txt")
        return False

    print("✓ All modules imported successfully")
    return True


def create_sample_files(base='.', n_per_class=20, test_per_class=5):
    """Write a small synthetic dataset in the CIFAR-10 binary layout plus a run config using it"""
    directory = Path(base, SAMPLE_DATA_DIR, 'cifar-10-batches-bin')
    write_cifar10(make_synthetic(n_per_class, split='train'),
                  make_synthetic(test_per_class, split='test'), directory)

    sample_config = """{
  "model": "FCNN1",
  "n_values": 3,
  "epochs": 5,
  "batch_size": 32,
  "dataset": {"kind": "cifar10", "path": "%s", "records_per_file": null}
}
""" % Path(base, SAMPLE_DATA_DIR).as_posix()

    config_path = Path(base, 'configs', 'sample_fcnn1.json')
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(sample_config, encoding='utf-8')

    print("✓ Created sample dataset and configs/sample_fcnn1.json")
    return config_path


def main():
    """Main setup function"""
    print("🚀 Setting up the low-bit classifier workspace...\n")

    create_directories()
    print()

    if not install_requirements():
        print("❌ Setup failed at package installation")
        return
    print()

    if not test_imports():
        print("❌ Setup failed at import testing")
        return
    print()

    create_env_file()
    print()

    create_sample_files()
    print()

    print("✅ Setup completed successfully!")
    print("\n📋 Next steps:")
    print("1. Point LOWBIT_DATA_DIR in .env at your CIFAR-10 binary batches")
    print("2. Run: python cli.py train --config configs/sample_fcnn1.json --out runs/sample")
    print("3. Run: python cli.py inspect runs/sample/model.lbq")


if __name__ == '__main__':
    main()
