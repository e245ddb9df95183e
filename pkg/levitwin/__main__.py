from levitwin.cli import main

raise SystemExit(main())
