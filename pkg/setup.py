from setuptools import setup, find_packages

setup(
    name='moerpl',
    version='2.0.2',
    packages=find_packages(exclude=['tests', 'examples*']),
    url='https://github.com/pablo-chacon/moerpl/tree/main',
    license='MIT',
    author='pablo-chacon',
    author_email='ekarlsson66@gmail.com',
    description='Expert replacement compression lab for toy Mixture-of-Experts models',
    install_requires=[
        'numpy',
        'pandas',
        'scikit-learn',
        'python-dotenv',
    ],
    extras_require={
        'test': [
            'pytest',
            'hypothesis',
        ],
    },
    entry_points={
        'console_scripts': [
            'moerpl=moerpl.app:main',
        ],
    },
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    python_requires='>=3.9',
)
