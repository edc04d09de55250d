from mrcn.cli import main

main()
