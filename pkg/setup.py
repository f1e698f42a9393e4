from setuptools import setup, find_packages

setup(
    name='Seal2Real',
    version='0.1.0',
    packages=find_packages(include=['modules', 'modules.*']),
    py_modules=['main'],
    install_requires=[
        'pandas>=1.3.0',
        'numpy>=1.20.0',
        'python-dotenv>=0.19.0',
        'torch>=2.0.0',
        'torchvision>=0.15.0',
        'Pillow>=9.0.0',
        'scipy>=1.7.0',
        'tqdm>=4.60.0',
    ],
    entry_points={
        'console_scripts': [
            'seal2real=main:main',
        ],
    },
    author='Akhil Bongu',
    author_email='akhil.ssj2@gmail.com',
    description='Turns synthetic seal document images into realistic ones with a prompt-conditioned diffusion prior and a forger network',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    classifiers=[
        'Programming Language :: Python :: 3',
        'Operating System :: OS Independent',
    ],
    python_requires='>=3.8',
)
