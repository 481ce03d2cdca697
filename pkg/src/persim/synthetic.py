"""Synthetic fixtures: a 50-item corpus, a shopper population, and scripts.

Nothing here touches real PersonalWAB or Amazon data. The population has
the same shape as the filtered benchmark (377 female and 67 male profiles
with an occupation) plus profiles lacking one, and the scripted backend
drives every pipeline stage deterministically.
"""

from __future__ import annotations

import re

from .corpus import ProductItem
from .evaluate import METRICS, TrialRecord, run_trials
from .llm_backend import CompletionRequest, ScriptedBackend, ScriptRule
from .persona import AGE_RANGES, Persona, UserProfileRecord, make_persona
from .recommend import SCENARIOS, QueryPhrase, RankedItem, RecommendationList

# (item_id, title, brand, domain, price, features, description, rating)
_ITEMS = [
    ("B00AQUA001", "Aquaphor Healing Ointment Advanced Therapy Skin Protectant", "Aquaphor",
     "Health and Household", 5.49, ["fragrance-free", "dermatologist recommended", "skincare for dry sensitive skin"],
     "Water-free ointment that helps soothe rosacea-prone skin, reduce redness and repair the skin barrier.", 4.8),
    ("B00NATB002", "Nature's Bounty Vitamin E Oil 30,000IU", "Nature's Bounty",
     "Health and Household", 8.95, ["topical antioxidant", "fragrance-free", "hydrating"],
     "Topical oil that hydrates and calms irritated skin.", 4.5),
    ("B00PURI003", "Puriya Eczema Cream NEA-accepted", "Puriya",
     "Health and Household", 32.21, ["plant-based", "fragrance-free", "shea butter", "hyaluronic acid"],
     "Cream designed for sensitive, inflamed skin.", 4.3),
    ("B00CERA004", "CeraVe Healing Ointment 12 oz", "CeraVe",
     "Health and Household", 19.28, ["fragrance-free", "NEA-approved", "ceramides"],
     "All-day hydration and barrier repair moisturizer base.", 4.7),
    ("B00CALM005", "Calmoseptine Ointment 4 oz", "Calmoseptine",
     "Health and Household", 7.22, ["skin protectant", "skincare", "reduces redness", "multipurpose"],
     "Protectant that reduces redness and irritation.", 4.6),
    ("B00LRPT006", "La Roche-Posay Toleriane Double Repair Moisturizer", "La Roche-Posay",
     "Health and Household", 21.99, ["fragrance-free", "moisturizer", "sensitive skin", "niacinamide"],
     "Daily skincare moisturizer to soothe sensitive, rosacea-prone skin and reduce redness.", 4.6),
    ("B00TINT007", "Light Coverage Tinted Moisturizer SPF 30", "BareGlow",
     "Health and Household", 24.50, ["tinted moisturizer", "light coverage", "natural finish", "SPF 30"],
     "Sheer tint that evens tone and looks natural all day.", 4.2),
    ("B00DOCB008", "Doctor's Best Brain Magnesium 90 Count", "Doctor's Best",
     "Health and Household", 39.29, ["magnesium L-threonate", "sleep support", "high absorption"],
     "Magnesium supplement that supports sleep, memory and stress relief.", 4.4),
    ("B00VITV009", "Vital Vitamins Brain Booster", "Vital Vitamins",
     "Health and Household", 21.95, ["B12", "ginkgo", "DMAE", "caffeine-free"],
     "Cognitive support supplement.", 4.0),
    ("B00ARAZ010", "Arazo Nutrition Glucosamine Chondroitin Turmeric MSM Boswellia 180 Tablets",
     "Arazo Nutrition", "Health and Household", 24.95, ["joint support", "glucosamine", "turmeric", "daily supplement"],
     "Comprehensive joint formula supporting mobility and comfort.", 4.5),
    ("B00TOSH011", "Toshiba Canvio Slim II 1TB Portable Hard Drive", "Toshiba",
     "Electronics", 101.00, ["1TB", "portable", "encryption", "automatic backup"],
     "Slim external drive for photos and videos storage.", 4.4),
    ("B00SEAG012", "Seagate FreeAgent Desktop 250GB Hard Drive", "Seagate",
     "Electronics", 64.99, ["250GB", "desktop", "USB 2.0", "quiet"],
     "Dependable archival external storage drive.", 4.0),
    ("B00TOSH013", "Toshiba 320GB USB 2.0 Portable External HDD", "Toshiba",
     "Electronics", 60.00, ["320GB", "shock protection", "portable"],
     "Practical portable drive to back up media content.", 4.1),
    ("B00SAND014", "SanDisk Extreme Portable SSD 1TB", "SanDisk",
     "Electronics", 99.99, ["1TB", "SSD", "fast transfer", "rugged"],
     "High-speed portable solid state storage for photos and video.", 4.7),
    ("B00SAND015", "SanDisk Extreme PRO 256GB SD Card", "SanDisk",
     "Electronics", 45.99, ["256GB", "SD card", "high-speed", "4K video"],
     "Fast memory card for cameras.", 4.8),
    ("B00WDMP016", "WD My Passport 2TB External Hard Drive", "Western Digital",
     "Electronics", 79.99, ["2TB", "portable", "password protection", "backup software"],
     "Portable external hard drive with hardware encryption.", 4.6),
    ("B00SYNR017", "SYNERLOGIC Chrome OS Keyboard Shortcut Sticker", "SYNERLOGIC",
     "Electronics", 4.99, ["keyboard sticker", "Chromebook", "productivity"],
     "Reference sticker for keyboard shortcuts.", 4.3),
    ("B00CBLX018", "Braided PC Cable Extension Kit", "CableMod",
     "Electronics", 29.99, ["PC cable extension", "sleeved", "clean build"],
     "Sleeved extension cables for a tidy PC setup.", 4.5),
    ("B00ANKR019", "Anker USB-C Hub 7-in-1", "Anker",
     "Electronics", 35.99, ["USB-C", "HDMI", "SD card reader"],
     "Compact hub adding ports to laptops.", 4.5),
    ("B00LOGI020", "Logitech MX Keys Wireless Keyboard", "Logitech",
     "Electronics", 99.00, ["wireless", "backlit", "multi-device"],
     "Comfortable keyboard for productivity.", 4.7),
    ("B00RUBB021", "Rubbermaid Clear Pitcher 2.25 Quart", "Rubbermaid",
     "Home and Kitchen", 12.49, ["BPA-free", "clear", "dishwasher safe"],
     "Pitcher for water and iced tea.", 4.6),
    ("B00BAMB022", "Bamboo Kitchen Trolley with Storage Shelves", "HomeCraft",
     "Home and Kitchen", 89.00, ["bamboo", "eco-friendly", "small space", "rolling"],
     "Sustainable rolling kitchen cart for small kitchens.", 4.2),
    ("B00DAWN023", "Dawn Ultra Platinum Foam Dishwashing Foam Fresh Rapids Scent", "Dawn",
     "Home and Kitchen", 3.69, ["grease cleaning", "fresh scent", "foam"],
     "Dish foam that cuts grease with minimal water.", 4.7),
    ("B00OXIC024", "OxiClean Odor Blasters Versatile Odor and Stain Remover Powder 5 lb", "OxiClean",
     "Home and Kitchen", 11.78, ["citrus scent", "chlorine-free", "stain remover"],
     "Odor and stain remover for laundry and kitchen surfaces.", 4.5),
    ("B00WOOL025", "Pure Homemaker Wool Dryer Balls 6-Pack", "Pure Homemaker",
     "Home and Kitchen", None, ["reusable", "eco-friendly", "natural scent"],
     "Reusable alternative to chemical dryer sheets.", 4.6),
    ("B00METH026", "Method All-Purpose Natural Surface Cleaner", "Method",
     "Home and Kitchen", 4.29, ["eco-friendly", "plant-based", "pink grapefruit scent", "cleaning"],
     "Naturally derived cleaner for kitchen counters.", 4.7),
    ("B00KEUR027", "Keurig K-Mini Single Serve Coffee Maker", "Keurig",
     "Home and Kitchen", 79.99, ["coffee maker", "compact", "single serve"],
     "Small coffee brewer for small spaces.", 4.4),
    ("B00INST028", "Instant Pot Duo 6 Quart", "Instant Pot",
     "Home and Kitchen", 89.95, ["pressure cooker", "slow cooker", "kitchen appliance"],
     "Multi-use programmable cooker.", 4.7),
    ("B00SEVN029", "Seventh Generation Dish Liquid Free and Clear", "Seventh Generation",
     "Home and Kitchen", 3.99, ["fragrance-free", "plant-based", "eco-friendly", "cleaning"],
     "Unscented dish soap for sensitive skin.", 4.6),
    ("B00OXOG030", "OXO Good Grips Salad Spinner", "OXO",
     "Home and Kitchen", 29.99, ["kitchen", "dishwasher safe", "one-handed"],
     "Salad spinner with brake button.", 4.8),
    ("B00GREN031", "Green Mountain Breakfast Blend Coffee K-Cups 72 Count", "Green Mountain",
     "Grocery and Gourmet Food", 38.49, ["coffee", "light roast", "K-Cup"],
     "Smooth light roast coffee pods.", 4.6),
    ("B00KIND032", "KIND Bars Dark Chocolate Nuts and Sea Salt 12 Count", "KIND",
     "Grocery and Gourmet Food", 14.99, ["snack", "gluten-free", "low sugar"],
     "Nut bars for snacking.", 4.7),
    ("B00BLUE033", "Blue Diamond Almonds Smokehouse 16 oz", "Blue Diamond",
     "Grocery and Gourmet Food", 8.98, ["snack", "almonds", "protein"],
     "Smoky roasted almonds.", 4.7),
    ("B00TWIN034", "Twinings Chamomile Herbal Tea 100 Bags", "Twinings",
     "Grocery and Gourmet Food", 16.50, ["herbal tea", "caffeine-free", "calming"],
     "Chamomile tea for relaxing evenings.", 4.7),
    ("B00LAVZ035", "Lavazza Super Crema Whole Bean Coffee 2.2 lb", "Lavazza",
     "Grocery and Gourmet Food", 22.99, ["whole bean", "espresso", "medium roast", "coffee"],
     "Creamy espresso blend.", 4.5),
    ("B00QUAK036", "Quaker Old Fashioned Oats 42 oz", "Quaker",
     "Grocery and Gourmet Food", 5.98, ["whole grain", "breakfast", "heart healthy"],
     "Rolled oats for breakfast.", 4.8),
    ("B00NATV037", "Nature Valley Crunchy Granola Bars Oats n Honey", "Nature Valley",
     "Grocery and Gourmet Food", 6.48, ["snack", "granola", "whole grain"],
     "Crunchy oat bars.", 4.6),
    ("B00ORGN038", "Orgain Organic Plant Based Protein Powder", "Orgain",
     "Grocery and Gourmet Food", 29.99, ["plant-based", "protein", "organic", "wellness"],
     "Vegan protein powder for smoothies.", 4.4),
    ("B00MAGN039", "Natural Vitality Calm Magnesium Drink Mix", "Natural Vitality",
     "Grocery and Gourmet Food", 24.99, ["magnesium", "sleep support", "leg cramps", "drink mix"],
     "Magnesium citrate powder that supports relaxation and sleep.", 4.6),
    ("B00POPC040", "SkinnyPop Original Popcorn 12 Pack", "SkinnyPop",
     "Grocery and Gourmet Food", 13.99, ["snack", "gluten-free", "non-GMO"],
     "Light popcorn snack packs.", 4.7),
    ("B00HANE041", "Hanes Men's EcoSmart Fleece Sweatshirt", "Hanes",
     "Clothing, Shoes and Jewelry", 14.00, ["fleece", "comfortable", "men"],
     "Everyday pullover sweatshirt.", 4.5),
    ("B00LEVI042", "Levi's Women's 721 High Rise Skinny Jeans", "Levi's",
     "Clothing, Shoes and Jewelry", 59.50, ["denim", "high rise", "women"],
     "Stretch skinny jeans.", 4.4),
    ("B00SKCH043", "Skechers Go Walk Joy Walking Shoe", "Skechers",
     "Clothing, Shoes and Jewelry", 45.00, ["walking shoe", "lightweight", "cushioned"],
     "Comfortable slip-on walking shoes.", 4.6),
    ("B00ALLB044", "Allbirds Wool Runners", "Allbirds",
     "Clothing, Shoes and Jewelry", 98.00, ["merino wool", "sustainable", "eco-friendly", "sneakers"],
     "Sustainable wool sneakers.", 4.3),
    ("B00COLM045", "Columbia Women's Benton Springs Fleece Jacket", "Columbia",
     "Clothing, Shoes and Jewelry", 40.00, ["fleece", "jacket", "women", "warm"],
     "Soft fleece full-zip jacket.", 4.8),
    ("B00TIMX046", "Timex Weekender Watch 38mm", "Timex",
     "Clothing, Shoes and Jewelry", 42.00, ["watch", "analog", "nylon strap"],
     "Casual everyday watch.", 4.5),
    ("B00DRSC047", "Dr. Scholl's Comfort Insoles for Men", "Dr. Scholl's",
     "Clothing, Shoes and Jewelry", 12.99, ["insoles", "arch support", "joint comfort"],
     "Cushioning insoles that reduce foot and joint fatigue.", 4.2),
    ("B00YOGA048", "Lululemon Align High-Rise Yoga Pant", "Lululemon",
     "Clothing, Shoes and Jewelry", 98.00, ["yoga", "buttery soft", "wellness"],
     "Lightweight yoga leggings.", 4.7),
    ("B00COMP049", "Physix Gear Compression Socks", "Physix Gear",
     "Clothing, Shoes and Jewelry", 16.95, ["compression", "circulation", "leg cramps"],
     "Graduated compression socks for leg comfort.", 4.4),
    ("B00PAND050", "Pandora Moments Snake Chain Bracelet", "Pandora",
     "Clothing, Shoes and Jewelry", 65.00, ["sterling silver", "charm bracelet", "gift"],
     "Classic charm bracelet.", 4.8),
]


def synthetic_corpus() -> list[ProductItem]:
    return [
        ProductItem(
            item_id=i, title=t, brand=b, domain=d, price=p, features=tuple(f),
            description=desc, average_rating=r,
        )
        for i, t, b, d, p, f, desc, r in _ITEMS
    ]


_OCCUPATIONS = ("graduate student", "nurse", "software engineer", "teacher", "retired", "accountant",
                "designer", "sales associate")
_INTERESTS = (
    ("skincare", "wellness", "home goods"),
    ("electronics", "storage", "health supplements"),
    ("kitchen appliances", "coffee", "eco-friendly cleaning"),
    ("snacks", "household essentials", "walking shoes"),
    ("clothing", "yoga", "herbal tea"),
)
_BRANDS = (("CeraVe", "La Roche-Posay"), ("Toshiba", "SanDisk"), ("Keurig", "Method"),
           ("KIND", "Skechers"), ("Lululemon", "Twinings"))
_TONES = ("enthusiastic and practical", "detail-rich and brand-aware", "brief and direct",
          "friendly and curious", "skeptical and price-focused")
_PRICE = ("budget-conscious", "moderately price sensitive", "willing to pay for quality")


def _profile(uid: str, gender: str, n: int, occupation: str | None) -> UserProfileRecord:
    return UserProfileRecord(
        user_id=uid,
        gender=gender,
        age_range=AGE_RANGES[n % len(AGE_RANGES)],
        occupation=occupation,
        price_sensitivity=_PRICE[n % len(_PRICE)],
        shopping_interests=_INTERESTS[n % len(_INTERESTS)],
        brand_preferences=_BRANDS[n % len(_BRANDS)],
        behavioral_traits={
            "diversity_preference": ("low", "medium", "high")[n % 3],
            "interaction_complexity": ("simple", "moderate", "detailed")[(n // 3) % 3],
            "tone_and_style": _TONES[n % len(_TONES)],
            "review_awareness": ("high", "medium")[n % 2],
        },
    )


def synthetic_population(
    female: int = 377, male: int = 67, incomplete: int = 56
) -> list[UserProfileRecord]:
    """``female`` + ``male`` complete profiles, then ``incomplete`` without an occupation.

    Incomplete profiles alternate between a missing and a blank occupation.
    """
    records = []
    for n in range(female):
        records.append(_profile(f"F{n:04d}", "female", n, _OCCUPATIONS[n % len(_OCCUPATIONS)]))
    for n in range(male):
        records.append(_profile(f"M{n:04d}", "male", n, _OCCUPATIONS[(n + 3) % len(_OCCUPATIONS)]))
    for n in range(incomplete):
        records.append(_profile(f"X{n:04d}", ("female", "male")[n % 2], n, None if n % 4 < 2 else " "))
    return records


PERSONA_A = UserProfileRecord(
    user_id="PA",
    gender="female",
    age_range="25-34",
    occupation="graduate student",
    price_sensitivity="budget-conscious, prefers items under $30",
    shopping_interests=("kitchen appliances", "wellness", "home goods", "coffee", "clothing"),
    brand_preferences=("CeraVe", "La Roche-Posay"),
    behavioral_traits={
        "tone_and_style": "enthusiastic and practical",
        "diversity_preference": "medium",
        "review_awareness": "relies on peer reviews",
        "opening_query": (
            "Looking for a high-quality skincare product to soothe rosacea and reduce redness. "
            "Prefer something with great reviews and proven effectiveness. Any recommendations?"
        ),
        "followup_query": (
            "Can you help me find a tinted moisturizer that gives light coverage and looks "
            "natural throughout the day?"
        ),
        "cross_task_query": (
            "Hey there! I'm excited to explore some eco-friendly cleaning options for my "
            "kitchen. Any recommendations for effective, well-rated products that smell great?"
        ),
    },
)

PERSONA_B = UserProfileRecord(
    user_id="PB",
    gender="male",
    age_range="56+",
    occupation="retired",
    price_sensitivity="values quality and value, under $100",
    shopping_interests=("health supplements", "electronics", "household essentials", "snacks"),
    brand_preferences=("SanDisk", "Toshiba", "Doctor's Best", "Nature Made"),
    behavioral_traits={
        "tone_and_style": "detail-rich and brand-aware",
        "diversity_preference": "low",
        "review_awareness": "checks ratings carefully",
        "opening_query": (
            "Hi there! I'm looking for some reliable storage options for my digital photos and "
            "videos. Any suggestions for high-capacity, fast memory cards or external drives?"
        ),
        "followup_query": (
            "Also curious, do you know any high-quality magnesium supplements that help with "
            "leg cramps and sleep?"
        ),
        "cross_task_query": (
            "I'm looking for something to help with my joints, preferably a gentle supplement "
            "I can take daily."
        ),
    },
)


def showcase_personas() -> list[Persona]:
    return [make_persona(PERSONA_A), make_persona(PERSONA_B)]


def demo_profiles(n: int = 4) -> list[UserProfileRecord]:
    """The two showcase profiles followed by synthetic ones, all with preset queries."""
    out = [PERSONA_A, PERSONA_B][:n]
    extra_queries = (
        ("Looking for a compact coffee maker for a small kitchen.",
         "I need whole bean coffee to go with it.",
         "Can you suggest healthy snacks for work?"),
        ("I want comfortable walking shoes with good cushioning.",
         "Now I need insoles for joint comfort.",
         "Any compression socks for leg cramps?"),
    )
    for k in range(max(0, n - len(out))):
        base = _profile(f"S{k:03d}", ("female", "male")[k % 2], k + 2, _OCCUPATIONS[k % 8])
        a, b, c = extra_queries[k % len(extra_queries)]
        traits = {**base.behavioral_traits, "opening_query": a, "followup_query": b, "cross_task_query": c}
        out.append(UserProfileRecord.from_dict({**base.to_dict(), "traits": traits}))
    return out


def demo_personas(n: int = 4) -> list[Persona]:
    return [make_persona(p) for p in demo_profiles(n)]


# -- scripted backend -------------------------------------------------------

AGENT_QUESTIONS = [
    "Thanks for sharing! What budget range do you have in mind?",
    "Are there specific brands you trust or have tried before?",
    "Which features matter most to you for this purchase?",
    "How soon do you need it, and is there anything you want to avoid?",
]

# Index 0 answers an opening-query request (no assistant turns yet); from
# the simulator's side its own opening query counts as a turn thereafter.
USER_ANSWERS = [
    "I'm shopping for \\g<interests> and would love some suggestions.",
    "I'd like something \\g<price>.",
    "I usually stick with well-reviewed brands, but I'm open to trying others.",
    "Reliability and good reviews matter most to me.",
    "No rush, just something dependable.",
]


def pipeline_rules() -> list[ScriptRule]:
    """Regex rules that answer every request the pipeline and judge issue.

    Rules are matched in order against the whole request text. User
    answers echo the persona prompt, the query echoes the opening request,
    the ranker keeps the first three candidates, and the judge's scores
    depend only on the scenario.
    """
    return [
        ScriptRule(
            match=r"Interaction context: SessionA",
            responses=["relevance: 5 - matches stated needs\ndiversity: 3 - similar items\nnovelty: 3 - familiar picks"],
        ),
        ScriptRule(
            match=r"Interaction context: SessionB",
            responses=["relevance: 4 - mostly on target\ndiversity: 4 - varied picks\nnovelty: 3 - some new ideas"],
        ),
        ScriptRule(
            match=r"Interaction context: CrossTaskB",
            responses=["relevance: 5 - carries over preferences\ndiversity: 3 - related items\nnovelty: 2 - expected"],
        ),
        ScriptRule(
            match=r"Retrieved Items:",
            each=r"^\[\d+\] (?P<id>\S+) \| (?P<title>[^|]+?) \|",
            item="{n}. \\g<id> — \\g<title> fits the stated preferences",
            limit=3,
        ),
        ScriptRule(
            match=(
                r"Reference Interview:\nUser: (?:[^\n]*?\b(?:for|find|need|want)\b )?"
                r"(?:(?:a|an|some|the) )?(?P<q>[^\s.,!?]+(?: [^\s.,!?]+){0,3})"
            ),
            responses=["\\g<q>"],
        ),
        ScriptRule(match=r"^system: You are a highly capable shopping assistant", responses=AGENT_QUESTIONS),
        ScriptRule(
            match=r"based on your preferences, (?P<price>[^\n]+?), and (?P<interests>[^\n]+?)\.\n",
            responses=USER_ANSWERS,
        ),
    ]


def pipeline_backend() -> ScriptedBackend:
    return ScriptedBackend(pipeline_rules())


# -- reference-pattern trials ---------------------------------------------------

# Scenario x metric means read off the reported bar chart; the cross-task
# diversity bar carries no number, so the fixture uses 3.20.
REFERENCE_PATTERN = {
    "SessionA": (4.63, 3.33, 2.97),
    "SessionB": (4.45, 3.42, 3.05),
    "CrossTaskB": (4.75, 3.20, 2.95),
}


def allocate_scores(target_mean: float, n: int) -> list[int]:
    """``n`` Likert scores whose mean is the closest k/n to ``target_mean``.

    Ones with the higher value come first.
    """
    total = round(target_mean * n)
    base, extra = divmod(total, n)
    scores = [base + 1] * extra + [base] * (n - extra)
    if not all(1 <= s <= 5 for s in scores):
        raise ValueError(f"mean {target_mean} not reachable with Likert scores")
    return scores


def reference_pattern_judge(n_personas: int) -> ScriptedBackend:
    """Scripted judge whose scores reproduce ``REFERENCE_PATTERN`` over ``n_personas`` personas."""
    table = {
        scenario: [allocate_scores(mean, n_personas) for mean in means]
        for scenario, means in REFERENCE_PATTERN.items()
    }

    def respond(request: CompletionRequest) -> str:
        text = request.messages[-1].content
        scenario = re.search(r"Interaction context: (\w+)", text).group(1)
        index = int(re.search(r"Search phrase used: persona (\d+)", text).group(1))
        rel, div, nov = (table[scenario][m][index] for m in range(len(METRICS)))
        return f"relevance: {rel} - fixture\ndiversity: {div} - fixture\nnovelty: {nov} - fixture"

    return ScriptedBackend(respond)


def reference_pattern_trials(n_personas: int = 120, judged_at: str = "2025-01-01T00:00:00Z") -> list[TrialRecord]:
    """120 x 3 trials judged by :func:`reference_pattern_judge` through :func:`run_trials`."""
    personas = [
        make_persona(_profile(f"P{n:03d}", ("female", "male")[n % 2], n, "teacher"))
        for n in range(n_personas)
    ]
    item = synthetic_corpus()[0]
    results = {}
    for n, persona in enumerate(personas):
        results[persona.persona_id] = {
            scenario: RecommendationList(
                scenario,
                (RankedItem(item, 1, "fixture"),),
                QueryPhrase(f"persona {n}", 2),
                (item.item_id,),
            )
            for scenario in SCENARIOS
        }
    return run_trials(personas, results, reference_pattern_judge(n_personas), judged_at=judged_at)

