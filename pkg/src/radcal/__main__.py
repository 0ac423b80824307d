from radcal.cli import main

raise SystemExit(main())
