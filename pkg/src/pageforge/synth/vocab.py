"""Word lists for the synthetic regimes. Everything is lowercase ASCII."""

NAMES = (
    "maria", "joan", "pere", "anna", "josep", "marta", "jaume", "rosa", "francesc", "elena", "antoni",
    "teresa", "miquel", "clara", "pau", "laura", "jordi", "eulalia", "ramon", "agnes", "bernat", "isabel",
    "marc", "lucia", "oriol", "puig", "vidal", "soler", "ferrer", "roca", "serra", "pons", "riera", "font",
    "camps", "sala", "vila", "prat", "coll", "bosch", "casas", "torres", "mir", "pujol", "fabra",
)

OCCUPATIONS = (
    "weaver", "farmer", "tailor", "baker", "smith", "carpenter", "sailor", "miller", "mason", "merchant",
    "shoemaker", "cooper", "potter", "butcher", "fisher", "laborer", "gardener", "notary",
)

LOCATIONS = (
    "barcelona", "girona", "vic", "reus", "tarragona", "lleida", "manresa", "sabadell", "terrassa", "mataro",
    "badalona", "sitges", "olot", "berga", "solsona", "cardona", "igualada", "figueres", "blanes", "tortosa",
)

# Words used both as person names and as places; the forms/prose regimes rely on these.
AMBIGUOUS = (
    "jordan", "florence", "austin", "georgia", "victoria", "chester", "lincoln", "orlando", "adelaide",
    "charlotte", "preston", "milton", "regina", "sydney", "paris", "kent", "tyler", "dallas",
)

# Words that are names after a title but ordinary words elsewhere.
COMMON_NAMES = ("rose", "mark", "grace", "hope", "bill", "may", "will", "iris", "summer", "frank", "june", "dawn")

FILLER = (
    "the", "of", "and", "to", "was", "for", "with", "as", "by", "his", "her", "they", "this", "that",
    "which", "were", "said", "had", "have", "been", "are", "their", "after", "over", "more", "new", "city",
    "people", "official", "week", "year", "report", "state", "police", "country", "group", "talks", "forces",
    "world", "military", "leaders", "many", "some", "about", "against", "other", "trade", "water", "since",
)

WEEKDAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
MONTHS = ("january", "february", "march", "april", "june", "july", "august", "october", "november")

NAME_TITLES = ("mr", "mrs", "dr", "president")
PLACE_PREPS = ("in", "from", "near")
DATE_PREPS = ("on", "until")
ARTICLES = ("the", "a")

RECORD_CONNECTIVES = {"on": "on", "of": "of", "with": "with", "daughter": "daughter", "son": "son"}

FORM_KEYS = {"name": "name", "location": "place", "date": "date"}

SYLLABLES = (
    "ka", "lo", "mi", "ne", "ra", "to", "ve", "sa", "di", "bu", "po", "le", "ti", "gor", "ban", "mel",
    "sen", "dor", "vik", "lan", "zu", "ha", "ko", "ri", "na", "es", "ul", "in", "ar", "ot",
)
