from barl.cli import main

main()
