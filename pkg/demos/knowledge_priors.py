"""How category/word similarity steers subject and object attention.

Builds the synthetic embedding table, then prints the similarity of each
proposal category to the subject and object words of a query.

    python3 demos/knowledge_priors.py
"""

from kprn import querylang as ql
from kprn import synthgen as sg
from kprn.wordvec import knowledge_priors

config = sg.SynthConfig()
table = sg.build_embedding_fixture(sg.fixture_words(config))
parsed = ql.parse_attributes(ql.tokenize("red square left of blue circle"), sg.synth_lexicon(config))
print("subject:", parsed.category, " object:", parsed.rel_obj)

categories = ["square", "circle", "triangle", "star", "teapot"]
priors = knowledge_priors(table, categories, parsed.category, parsed.rel_obj)
print(f"{'category':<10} {'sim(subject)':>13} {'sim(object)':>12}")
for cat, s, o in zip(categories, priors.sim_subject, priors.sim_object):
    print(f"{cat:<10} {s:13.3f} {o:12.3f}")
print("(unknown words map to the zero vector, so 'teapot' scores 0)")
